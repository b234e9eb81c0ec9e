"""
Domain vocabulary for layer-3 cellular traces.

- Layer / MessageKind: the closed NAS and RRC message vocabularies
- AttackKind: the 21 multi-step attacks with their categories
- Label / AttackerLevel: ground truth attached to packets and traces
- Packet / Trace: immutable records plus the labeling and validation rules
"""

import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from app.config import load_data_file
from app.errors import (
    InvalidLabel,
    MsaLabelInFbsDataset,
    UnknownAttack,
    UnknownMessageKind,
)

logger = logging.getLogger(__name__)


class Layer(Enum):
    NAS = "NAS"
    RRC = "RRC"


class DatasetKind(Enum):
    """Which labeling equation a dataset follows."""
    FBS = "FBS"
    MSA = "MSA"


class AttackCategory(Enum):
    DOS = "DoS"
    LOCATION_TRACKING = "LocationTracking"
    ACTIVITY_MONITORING = "ActivityMonitoring"
    BIDDING_DOWN = "BiddingDown"
    BATTERY_DRAIN = "BatteryDrain"
    INFO_LEAK = "InfoLeak"
    MISINFORMATION = "Misinformation"
    RESOURCE_WASTE = "ResourceWaste"
    DEVICE_IDENTIFICATION = "DeviceIdentification"


NAS_KINDS: Tuple[str, ...] = (
    "AttachRequest", "AttachAccept", "AttachComplete", "AttachReject",
    "AuthenticationRequest", "AuthenticationResponse", "AuthenticationFailure",
    "AuthenticationReject", "IdentityRequest", "IdentityResponse",
    "SecurityModeCommand", "SecurityModeComplete", "SecurityModeReject",
    "TAURequest", "TAUAccept", "TAUReject", "ServiceRequest", "ServiceReject",
    "DetachRequest", "DetachAccept", "EMMInformation", "EMMStatus",
    "PagingWithIMSI", "GUTIReallocationCommand", "GUTIReallocationComplete",
)

RRC_KINDS: Tuple[str, ...] = (
    "systemInformationBlockType1", "systemInformation", "paging",
    "rrcConnectionRequest", "rrcConnectionSetup", "rrcConnectionSetupComplete",
    "rrcReject", "rrcConnectionRelease", "rrcConnectionReconfiguration",
    "rrcConnectionReconfigurationComplete", "rrcConnectionReestablishmentRequest",
    "rrcConnectionReestablishment", "rrcConnectionReestablishmentComplete",
    "rrcConnectionReestablishmentReject", "securityModeCommand", "securityModeComplete",
    "ueCapabilityEnquiry", "ueCapabilityInformation", "ueInformationRequest",
    "ueInformationResponse", "dlInformationTransfer", "ulInformationTransfer",
    "measurementReport", "rrcResumeRequest", "rrcResume",
)

VOCABULARY: Dict[Layer, Tuple[str, ...]] = {Layer.NAS: NAS_KINDS, Layer.RRC: RRC_KINDS}

# Schema column holding the message name; graph nodes are keyed on it.
KIND_FIELD: Dict[Layer, str] = {
    Layer.NAS: "nas_eps_nas_msg_emm_type_value",
    Layer.RRC: "lte-rrc_c1_showname",
}


def _load_schemas() -> Dict[Layer, Tuple[str, ...]]:
    table = load_data_file("field_schema.yaml")
    return {layer: tuple(table[layer.value]) for layer in Layer}


SCHEMAS: Dict[Layer, Tuple[str, ...]] = _load_schemas()
SCHEMA_SETS: Dict[Layer, frozenset] = {layer: frozenset(cols) for layer, cols in SCHEMAS.items()}


@dataclass(frozen=True)
class MessageKind:
    layer: Layer
    name: str

    def __str__(self) -> str:
        return self.name


def message_kind(layer: Layer, name: str) -> MessageKind:
    """Look up a registered message kind; raises UnknownMessageKind otherwise."""
    if name not in VOCABULARY[layer]:
        raise UnknownMessageKind(f"{name!r} is not a registered {layer.value} message")
    return MessageKind(layer, name)


@dataclass(frozen=True)
class AttackKind:
    id: int
    name: str
    category: AttackCategory
    secondary: Tuple[AttackCategory, ...] = ()

    @property
    def categories(self) -> Tuple[AttackCategory, ...]:
        return (self.category,) + self.secondary


_C = AttackCategory
ATTACKS: Tuple[AttackKind, ...] = (
    AttackKind(1, "Authentication relay attack", _C.ACTIVITY_MONITORING, (_C.DOS,)),
    AttackKind(2, "Bidding down with AttachReject", _C.DOS),
    AttackKind(3, "Paging channel hijacking", _C.DOS),
    AttackKind(4, "Location tracking via measurement reports", _C.LOCATION_TRACKING),
    AttackKind(5, "Capability Hijacking", _C.DOS, (_C.BIDDING_DOWN,)),
    AttackKind(6, "Incarceration with rrcReestablishReject", _C.DOS),
    AttackKind(7, "Lullaby attack using rrcReestablishRequest", _C.BATTERY_DRAIN),
    AttackKind(8, "Bidding down with ServiceReject", _C.DOS),
    AttackKind(9, "Mobile Network Mapping (MNmap)", _C.DEVICE_IDENTIFICATION),
    AttackKind(10, "Energy Depletion", _C.BATTERY_DRAIN),
    AttackKind(11, "Lullaby with rrcResume", _C.BATTERY_DRAIN),
    AttackKind(12, "Stealthy Kickoff", _C.DOS),
    AttackKind(13, "Incarceration with rrcReject and rrcRelease", _C.DOS),
    AttackKind(14, "IMSI catching", _C.INFO_LEAK),
    AttackKind(15, "NAS counter Desynch", _C.DOS),
    AttackKind(16, "X2 signalling flood", _C.RESOURCE_WASTE),
    AttackKind(17, "Handover hijacking", _C.DOS, (_C.BATTERY_DRAIN,)),
    AttackKind(18, "RRC replay", _C.DOS),
    AttackKind(19, "Lullaby with rrcReconfiguration", _C.BATTERY_DRAIN),
    AttackKind(20, "Bidding down with TAUReject", _C.DOS),
    AttackKind(21, "Panic Attack", _C.MISINFORMATION),
)

ATTACKS_BY_ID: Dict[int, AttackKind] = {a.id: a for a in ATTACKS}
N_MSA_CLASSES = len(ATTACKS) + 1


def attack_by_id(attack_id: int) -> AttackKind:
    try:
        return ATTACKS_BY_ID[int(attack_id)]
    except (KeyError, TypeError, ValueError):
        raise UnknownAttack(f"No attack with id {attack_id!r}")


def attack_by_name(name: str) -> AttackKind:
    for attack in ATTACKS:
        if attack.name.lower() == name.lower():
            return attack
    raise UnknownAttack(f"No attack named {name!r}")


class LabelKind(Enum):
    BENIGN = "Benign"
    FBS = "Fbs"
    MSA = "Msa"


_MSA_PATTERN = re.compile(r"^Msa\((\d+)\)$")


@dataclass(frozen=True)
class Label:
    """Ground truth of a packet, or the scenario of a whole trace."""
    kind: LabelKind
    attack: Optional[AttackKind] = None

    def __post_init__(self):
        if (self.kind == LabelKind.MSA) != (self.attack is not None):
            raise InvalidLabel("Msa labels need an attack; other labels must not carry one")

    @classmethod
    def msa(cls, attack: Union[AttackKind, int]) -> "Label":
        if not isinstance(attack, AttackKind):
            attack = attack_by_id(attack)
        return cls(LabelKind.MSA, attack)

    @classmethod
    def parse(cls, text: str) -> "Label":
        if text == LabelKind.BENIGN.value:
            return BENIGN
        if text == LabelKind.FBS.value:
            return FBS
        match = _MSA_PATTERN.match(text)
        if match:
            return cls.msa(int(match.group(1)))
        raise InvalidLabel(f"Unparseable label {text!r}")

    @property
    def is_attack(self) -> bool:
        return self.kind != LabelKind.BENIGN

    def __str__(self) -> str:
        if self.kind == LabelKind.MSA:
            return f"Msa({self.attack.id})"
        return self.kind.value


BENIGN = Label(LabelKind.BENIGN)
FBS = Label(LabelKind.FBS)


class AttackerLevel(IntEnum):
    NAIVE = 0
    OPTIMAL_SIGNAL = 1
    CLONED_CELL = 2
    MULTI_STEP = 3
    RESHAPING = 4


def label_code(label: Label, dataset_kind: DatasetKind) -> int:
    """
    Integer code of a label under a dataset's labeling equation.

    FBS dataset: Benign -> 0, Fbs -> 1.
    MSA dataset: Benign -> 0, Msa(attack) -> attack id (1..21).

    Raises:
        MsaLabelInFbsDataset: an Msa label in the FBS dataset
        InvalidLabel: an Fbs label in the MSA dataset
    """
    if label.kind == LabelKind.BENIGN:
        return 0
    if dataset_kind == DatasetKind.FBS:
        if label.kind == LabelKind.MSA:
            raise MsaLabelInFbsDataset(f"{label} cannot be encoded in the FBS dataset")
        return 1
    if label.kind == LabelKind.FBS:
        raise InvalidLabel("Fbs labels have no code in the MSA dataset")
    return label.attack.id


def decode_label(code: int, dataset_kind: DatasetKind) -> Label:
    """Inverse of label_code."""
    code = int(code)
    if code == 0:
        return BENIGN
    if dataset_kind == DatasetKind.FBS:
        if code == 1:
            return FBS
        raise InvalidLabel(f"Code {code} is outside the FBS label space")
    try:
        return Label.msa(code)
    except UnknownAttack:
        raise InvalidLabel(f"Code {code} is outside the MSA label space")


def label_space(dataset_kind: DatasetKind) -> List[Label]:
    if dataset_kind == DatasetKind.FBS:
        return [BENIGN, FBS]
    return [BENIGN] + [Label.msa(a) for a in ATTACKS]


FieldValue = Union[str, int, None]


@dataclass(frozen=True)
class Packet:
    trace_id: str
    seq: int
    layer: Layer
    kind: MessageKind
    fields: Mapping[str, FieldValue]
    label: Label

    def __post_init__(self) -> None:
        # read-only copy; the caller keeps its own dict
        object.__setattr__(self, "fields", MappingProxyType(dict(self.fields)))


@dataclass(frozen=True)
class Trace:
    trace_id: str
    scenario: Label
    attacker_level: AttackerLevel
    seed: int
    mobility: bool
    packets: Tuple[Packet, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.packets)

    @property
    def kinds(self) -> List[str]:
        return [p.kind.name for p in self.packets]

    @property
    def labels(self) -> List[Label]:
        return [p.label for p in self.packets]


def dataset_kind_of(traces: Iterable[Trace]) -> DatasetKind:
    """MSA as soon as one trace carries an Msa scenario, FBS otherwise."""
    for trace in traces:
        if trace.scenario.kind == LabelKind.MSA:
            return DatasetKind.MSA
    return DatasetKind.FBS


def split_layer(trace: Trace, layer: Layer) -> Trace:
    """Keep only the packets of one layer; order, seq and metadata are preserved."""
    return replace(trace, packets=tuple(p for p in trace.packets if p.layer == layer))


@dataclass(frozen=True)
class Violation:
    rule: str
    seq: Optional[int]
    detail: str

    def __str__(self) -> str:
        where = f"seq {self.seq}" if self.seq is not None else "trace"
        return f"{self.rule} at {where}: {self.detail}"


def validate(trace: Trace) -> List[Violation]:
    """
    Check every Trace/Packet invariant.

    Returns:
        One Violation per broken rule; empty when the trace is well formed.
    """
    violations: List[Violation] = []
    scenario = trace.scenario

    if scenario.kind == LabelKind.MSA and trace.attacker_level < AttackerLevel.MULTI_STEP:
        violations.append(Violation("LevelScenarioMismatch", None,
                                    f"{scenario} needs attacker level >= 3, got {int(trace.attacker_level)}"))
    if scenario.kind == LabelKind.FBS and trace.attacker_level > AttackerLevel.CLONED_CELL:
        violations.append(Violation("LevelScenarioMismatch", None,
                                    f"Fbs needs attacker level <= 2, got {int(trace.attacker_level)}"))

    previous_seq = None
    for packet in trace.packets:
        if packet.trace_id != trace.trace_id:
            violations.append(Violation("TraceIdMismatch", packet.seq,
                                        f"packet belongs to {packet.trace_id!r}"))
        if previous_seq is not None and packet.seq <= previous_seq:
            violations.append(Violation("NonMonotonicSeq", packet.seq,
                                        f"follows seq {previous_seq}"))
        previous_seq = packet.seq

        if packet.kind.layer != packet.layer:
            violations.append(Violation("LayerKindMismatch", packet.seq,
                                        f"{packet.kind.name} is not a {packet.layer.value} message"))
        elif packet.kind.name not in VOCABULARY[packet.layer]:
            violations.append(Violation("UnknownKind", packet.seq, packet.kind.name))

        unknown = [name for name in packet.fields if name not in SCHEMA_SETS[packet.layer]]
        if unknown:
            violations.append(Violation("UnknownField", packet.seq, ", ".join(sorted(unknown))))
        kind_value = packet.fields.get(KIND_FIELD[packet.layer])
        if kind_value is not None and kind_value != packet.kind.name:
            violations.append(Violation("KindFieldMismatch", packet.seq,
                                        f"{kind_value!r} != {packet.kind.name!r}"))

        if not _label_fits_scenario(packet.label, scenario):
            violations.append(Violation("ScenarioLabelMismatch", packet.seq,
                                        f"{packet.label} inside a {scenario} trace"))

    if scenario.is_attack and not any(p.label.is_attack for p in trace.packets):
        violations.append(Violation("MissingAttackLabel", None,
                                    f"{scenario} trace has no attack-labeled packet"))
    return violations


def _label_fits_scenario(label: Label, scenario: Label) -> bool:
    if label.kind == LabelKind.BENIGN:
        return True
    return label == scenario
