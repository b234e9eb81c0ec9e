#!/usr/bin/env python3
"""
Deterministic simulator of labeled layer-3 traces.

Produces:
- benign sessions (attach, authentication, security mode, EMM information,
  optional handovers with tracking-area updates, detach)
- FBS traces at attacker levels 0-2 (a fake cell lures the UE after a benign prefix)
- multi-step attack traces at levels 3-4 (FBS hook + a scripted attack)
- level-4 reshaping: field mutation plus benign message injection

Every trace is a pure function of (scenario, master seed, global trace index).
The attack catalogue and message templates live in app/data/attack_scripts.yaml.
"""

import asyncio
import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import DEFAULT_SEED, DEFAULT_WORKERS, load_config_file, load_data_file
from app.core_model import (
    AttackKind,
    AttackerLevel,
    BENIGN,
    FBS,
    KIND_FIELD,
    Label,
    LabelKind,
    Layer,
    Packet,
    Trace,
    attack_by_id,
    attack_by_name,
    message_kind,
)
from app.errors import InvalidScenario, NotAnAttackTrace, UnregisteredAttack
from app.schemas import ManifestRecord
from app.utils import MASK64, mix_seed

logger = logging.getLogger(__name__)

NAS = Layer.NAS
RRC = Layer.RRC

# Serving-cell columns stamped on every packet of a layer.
CELL_FIELDS: Dict[Layer, Tuple[str, ...]] = {
    NAS: ("e212_tai_mcc", "e212_tai_mnc", "nas_eps_emm_tai_tac"),
    RRC: ("lte_rrc_mcc", "lte_rrc_mnc", "lte_rrc_trackingAreaCode", "lte_rrc_cellIdentity",
          "lte_rrc_physCellId", "lte_rrc_rsrpResult_r9"),
}

MAX_CHATTER_RUNS = 16
MAX_RUN_LENGTH = 8
FBS_REJECT_CAUSES = [3, 7, 9, 11, 15]
RESHAPE_STREAM = 0x5245


def _draw(rng: np.random.Generator, value: Any) -> Any:
    """A list is a pool to draw from; anything else is returned unchanged."""
    if isinstance(value, list):
        return value[int(rng.integers(len(value)))]
    return value


def _draw_other(rng: np.random.Generator, pool: List[Any], current: Any) -> Any:
    candidates = [v for v in pool if v != current] or pool
    return candidates[int(rng.integers(len(candidates)))]


@dataclass(frozen=True)
class Cell:
    """Parameters a base station broadcasts; `fake` marks an attacker's cell."""
    mcc: str
    mnc: str
    tac: int
    cell_id: int
    pci: int
    rsrp: Tuple[int, ...]
    fake: bool = False

    def fields_for(self, layer: Layer, rng: np.random.Generator) -> Dict[str, Any]:
        if layer == NAS:
            return {"e212_tai_mcc": self.mcc, "e212_tai_mnc": self.mnc, "nas_eps_emm_tai_tac": self.tac}
        return {
            "lte_rrc_mcc": self.mcc,
            "lte_rrc_mnc": self.mnc,
            "lte_rrc_trackingAreaCode": self.tac,
            "lte_rrc_cellIdentity": self.cell_id,
            "lte_rrc_physCellId": self.pci,
            "lte_rrc_rsrpResult_r9": _draw(rng, list(self.rsrp)),
        }


@dataclass(frozen=True)
class ScriptStep:
    layer: Layer
    kind: str
    is_attack: bool
    fields: Dict[str, Any]


@dataclass(frozen=True)
class AttackScript:
    """Ordered message template of one multi-step attack, both layers interleaved."""
    attack: AttackKind
    steps: Tuple[ScriptStep, ...]
    preconditions: Tuple[str, ...] = ("connected",)

    @property
    def nas_steps(self) -> Tuple[ScriptStep, ...]:
        return tuple(s for s in self.steps if s.layer == NAS)

    @property
    def rrc_steps(self) -> Tuple[ScriptStep, ...]:
        return tuple(s for s in self.steps if s.layer == RRC)


class Catalogue:
    """Parsed attack_scripts.yaml."""

    PRECONDITIONS = ("camped", "connected")

    def __init__(self, table: Dict[str, Any]):
        self.network = table["network"]
        self.fake_cells = {int(level): spec for level, spec in table["fake_cells"].items()}
        self.uplink = {Layer(name): frozenset(kinds) for name, kinds in table["uplink"].items()}
        self.message_fields = {Layer(name): kinds for name, kinds in table["message_fields"].items()}
        self.non_critical = {Layer(name): kinds for name, kinds in table["non_critical"].items()}
        self.injection = {Layer(name): spec for name, spec in table["injection"].items()}
        self.scripts: Dict[int, AttackScript] = {}
        for entry in table["scripts"]:
            script = self._parse_script(entry)
            self.scripts[script.attack.id] = script

    def _parse_script(self, entry: Dict[str, Any]) -> AttackScript:
        attack = attack_by_id(entry["attack"])
        steps = []
        for raw in entry["steps"]:
            layer = Layer(raw["layer"])
            role = raw.get("role", "attack")
            if role not in ("attack", "trigger"):
                raise InvalidScenario(f"Attack {attack.id}: unknown step role {role!r}")
            steps.append(ScriptStep(layer, message_kind(layer, raw["kind"]).name,
                                    role == "attack", dict(raw.get("fields", {}))))
        preconditions = tuple(entry.get("preconditions", ["connected"]))
        unknown = [p for p in preconditions if p not in self.PRECONDITIONS]
        if unknown:
            raise InvalidScenario(f"Attack {attack.id}: unknown preconditions {unknown}")
        if not any(step.is_attack for step in steps):
            raise InvalidScenario(f"Attack {attack.id}: script emits no attack packet")
        return AttackScript(attack, tuple(steps), preconditions)

    def script_for(self, attack: AttackKind) -> AttackScript:
        try:
            return self.scripts[attack.id]
        except KeyError:
            raise UnregisteredAttack(f"No script registered for attack {attack.id} ({attack.name})")

    def home_cell(self, rng: np.random.Generator, exclude_tac: Optional[int] = None) -> Cell:
        net = self.network
        tacs = [t for t in net["tac_pool"] if t != exclude_tac]
        return Cell(
            mcc=net["mcc"],
            mnc=net["mnc"],
            tac=_draw(rng, tacs),
            cell_id=_draw(rng, net["cell_pool"]),
            pci=_draw(rng, net["pci_pool"]),
            rsrp=tuple(net["rsrp_benign"]),
        )

    def fake_cell(self, level: AttackerLevel, serving: Cell, rng: np.random.Generator) -> Cell:
        template = self.fake_cells[int(level)]

        def pick(key: str, cloned: Any) -> Any:
            value = template[key]
            return cloned if value == "clone" else _draw(rng, value)

        return Cell(
            mcc=pick("mcc", serving.mcc),
            mnc=pick("mnc", serving.mnc),
            tac=pick("tac", serving.tac),
            cell_id=pick("cell_id", serving.cell_id),
            pci=pick("pci", serving.pci),
            rsrp=tuple(self.network["rsrp_fbs"]),
            fake=True,
        )

    def render_fields(self, layer: Layer, kind: str, cell_fields: Dict[str, Any],
                      rng: np.random.Generator, header: Optional[int] = None,
                      overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        fields: Dict[str, Any] = {KIND_FIELD[layer]: kind}
        if layer == NAS:
            fields["nas_eps_security_header_type"] = header if header is not None else 0
            fields["nas_eps_emm_spare_half"] = 0
        else:
            fields["lte_rrc_reserved_001"] = 0
        fields.update(cell_fields)
        for name, value in self.message_fields[layer].get(kind, {}).items():
            fields[name] = _draw(rng, value)
        for name, value in (overrides or {}).items():
            fields[name] = _draw(rng, value)
        return fields


_catalogue: Optional[Catalogue] = None


def get_catalogue() -> Catalogue:
    """Load the attack catalogue once per process."""
    global _catalogue
    if _catalogue is None:
        _catalogue = Catalogue(load_data_file("attack_scripts.yaml"))
        logger.debug(f"Loaded {len(_catalogue.scripts)} attack scripts")
    return _catalogue


# ---------------------------------------------------------------------------
# Scenario specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    scenario: Label
    attacker_level: AttackerLevel = AttackerLevel.NAIVE
    mobility: bool = False
    n_traces: int = 1
    master_seed: int = DEFAULT_SEED
    noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "attacker_level", AttackerLevel(int(self.attacker_level)))
        kind = self.scenario.kind
        level = self.attacker_level
        if kind == LabelKind.MSA and level < AttackerLevel.MULTI_STEP:
            raise InvalidScenario(f"{self.scenario} needs attacker level >= 3, got {int(level)}")
        if kind == LabelKind.FBS and level > AttackerLevel.CLONED_CELL:
            raise InvalidScenario(f"Fbs scenarios run at levels 0-2, got {int(level)}")
        if kind == LabelKind.BENIGN and level != AttackerLevel.NAIVE:
            raise InvalidScenario("Benign scenarios have no attacker level")
        if self.n_traces < 1:
            raise InvalidScenario(f"n_traces must be positive, got {self.n_traces}")
        if not 0.0 <= self.noise <= 1.0:
            raise InvalidScenario(f"noise must lie in [0, 1], got {self.noise}")
        if not 0 <= self.master_seed <= MASK64:
            raise InvalidScenario(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")

    @classmethod
    def from_dict(cls, entry: Dict[str, Any], master_seed: Optional[int] = None) -> "ScenarioSpec":
        """
        Build a spec from one `scenarios:` entry of a config file.

        Keys: scenario (benign|fbs|msa), attack (id or name, msa only),
        level, mobility, traces, noise, master_seed.
        """
        if "scenario" not in entry:
            raise InvalidScenario(f"Scenario entry {entry} has no 'scenario' key")
        kind = str(entry["scenario"]).strip().lower()
        if kind == "benign":
            scenario = BENIGN
        elif kind == "fbs":
            scenario = FBS
        elif kind == "msa":
            attack = entry.get("attack")
            if attack is None:
                raise InvalidScenario("msa scenarios need an 'attack' id or name")
            attack_kind = attack_by_id(attack) if isinstance(attack, int) else attack_by_name(str(attack))
            scenario = Label.msa(attack_kind)
        else:
            raise InvalidScenario(f"Unknown scenario {entry['scenario']!r}")

        default_level = AttackerLevel.MULTI_STEP if scenario.kind == LabelKind.MSA else AttackerLevel.NAIVE
        seed = entry.get("master_seed", master_seed if master_seed is not None else DEFAULT_SEED)
        try:
            level = AttackerLevel(int(entry.get("level", entry.get("attacker_level", default_level))))
            return cls(
                scenario=scenario,
                attacker_level=level,
                mobility=bool(entry.get("mobility", False)),
                n_traces=int(entry.get("traces", entry.get("n_traces", 1))),
                master_seed=int(seed),
                noise=float(entry.get("noise", 0.0)),
            )
        except (TypeError, ValueError) as e:
            raise InvalidScenario(f"Invalid scenario entry {entry}: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario.kind.value,
            "attack": self.scenario.attack.id if self.scenario.attack else None,
            "attacker_level": int(self.attacker_level),
            "mobility": self.mobility,
            "n_traces": self.n_traces,
            "master_seed": self.master_seed,
            "noise": self.noise,
        }


def load_scenarios(path: str) -> List[ScenarioSpec]:
    """Read `master_seed` + `scenarios:` from a YAML/JSON config file."""
    config = load_config_file(path)
    entries = config.get("scenarios")
    if not isinstance(entries, list) or not entries:
        raise InvalidScenario(f"{path}: 'scenarios' must be a non-empty list")
    master_seed = config.get("master_seed")
    return [ScenarioSpec.from_dict(entry, master_seed) for entry in entries]


# ---------------------------------------------------------------------------
# Trace construction
# ---------------------------------------------------------------------------

class _TraceBuilder:
    def __init__(self, trace_id: str, seed: int, catalogue: Catalogue):
        self.trace_id = trace_id
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.catalogue = catalogue
        self.packets: List[Packet] = []
        self.nas_secured = False

    def _security_header(self, kind: str, cell: Cell) -> int:
        if cell.fake and kind not in self.catalogue.uplink[NAS]:
            return 0
        if kind == "SecurityModeCommand":
            return 3
        if kind == "SecurityModeComplete":
            return 4
        if not self.nas_secured:
            return 0
        if kind == "ServiceRequest":
            return 12
        if kind == "TAURequest":
            return 1
        return 2

    def emit(self, layer: Layer, kind: str, label: Label, cell: Cell,
             overrides: Optional[Dict[str, Any]] = None) -> None:
        header = self._security_header(kind, cell) if layer == NAS else None
        fields = self.catalogue.render_fields(layer, kind, cell.fields_for(layer, self.rng),
                                              self.rng, header, overrides)
        self.packets.append(Packet(
            trace_id=self.trace_id,
            seq=len(self.packets),
            layer=layer,
            kind=message_kind(layer, kind),
            fields=fields,
            label=label,
        ))
        if layer == NAS and kind == "SecurityModeComplete" and not cell.fake:
            self.nas_secured = True

    def build(self, spec: ScenarioSpec, level: Optional[AttackerLevel] = None) -> Trace:
        return Trace(
            trace_id=self.trace_id,
            scenario=spec.scenario,
            attacker_level=spec.attacker_level if level is None else level,
            seed=self.seed,
            mobility=spec.mobility,
            packets=tuple(self.packets),
        )


def trace_id_for(spec: ScenarioSpec, trace_index: int) -> str:
    level = int(spec.attacker_level)
    if spec.scenario.kind == LabelKind.BENIGN:
        return f"benign-{trace_index:06d}"
    if spec.scenario.kind == LabelKind.FBS:
        return f"fbs-l{level}-{trace_index:06d}"
    return f"msa-{spec.scenario.attack.id:02d}-l{level}-{trace_index:06d}"


def _builder(spec: ScenarioSpec, trace_index: int) -> _TraceBuilder:
    seed = mix_seed(spec.master_seed, trace_index)
    return _TraceBuilder(trace_id_for(spec, trace_index), seed, get_catalogue())


def _chatter(b: _TraceBuilder, cell: Cell, noise: float) -> None:
    runs = 0
    while runs < MAX_CHATTER_RUNS and b.rng.random() < noise:
        kind = _draw(b.rng, ["ulInformationTransfer", "dlInformationTransfer"])
        length = min(int(b.rng.geometric(0.5)), MAX_RUN_LENGTH)
        for _ in range(length):
            b.emit(RRC, kind, BENIGN, cell)
        runs += 1


def _handovers(b: _TraceBuilder, cell: Cell) -> Cell:
    for _ in range(1 + int(b.rng.integers(2))):
        target = b.catalogue.home_cell(b.rng, exclude_tac=cell.tac)
        b.emit(RRC, "measurementReport", BENIGN, cell)
        b.emit(RRC, "rrcConnectionReconfiguration", BENIGN, cell, {
            "lte_rrc_mobilityControlInfo_element": "present",
            "lte_rrc_targetPhysCellId": target.pci,
            "lte_rrc_t304": 500,
        })
        b.emit(RRC, "rrcConnectionReconfigurationComplete", BENIGN, target)
        b.emit(RRC, "ulInformationTransfer", BENIGN, target)
        b.emit(NAS, "TAURequest", BENIGN, target)
        b.emit(RRC, "dlInformationTransfer", BENIGN, target)
        b.emit(NAS, "TAUAccept", BENIGN, target)
        cell = target
    return cell


def _benign_session(b: _TraceBuilder, spec: ScenarioSpec, detach: bool) -> Cell:
    """Emit a legitimate session; returns the cell the UE is served by at the end."""
    cell = b.catalogue.home_cell(b.rng)
    for kind in ("systemInformationBlockType1", "rrcConnectionRequest",
                 "rrcConnectionSetup", "rrcConnectionSetupComplete"):
        b.emit(RRC, kind, BENIGN, cell)
    b.emit(NAS, "AttachRequest", BENIGN, cell)
    b.emit(RRC, "dlInformationTransfer", BENIGN, cell)
    b.emit(NAS, "AuthenticationRequest", BENIGN, cell)
    b.emit(RRC, "ulInformationTransfer", BENIGN, cell)
    b.emit(NAS, "AuthenticationResponse", BENIGN, cell)
    b.emit(NAS, "SecurityModeCommand", BENIGN, cell)
    b.emit(NAS, "SecurityModeComplete", BENIGN, cell)
    for kind in ("securityModeCommand", "securityModeComplete", "ueCapabilityEnquiry",
                 "ueCapabilityInformation", "rrcConnectionReconfiguration",
                 "rrcConnectionReconfigurationComplete"):
        b.emit(RRC, kind, BENIGN, cell)
    b.emit(NAS, "AttachAccept", BENIGN, cell)
    b.emit(NAS, "AttachComplete", BENIGN, cell)
    b.emit(RRC, "ulInformationTransfer", BENIGN, cell)
    b.emit(NAS, "EMMInformation", BENIGN, cell)
    b.emit(RRC, "dlInformationTransfer", BENIGN, cell)
    _chatter(b, cell, spec.noise)
    if spec.mobility:
        cell = _handovers(b, cell)
    if detach:
        b.emit(RRC, "ulInformationTransfer", BENIGN, cell)
        b.emit(NAS, "DetachRequest", BENIGN, cell)
        b.emit(RRC, "rrcConnectionRelease", BENIGN, cell)
    return cell


def gen_benign(spec: ScenarioSpec, trace_index: int) -> Trace:
    """Generate one legitimate session; every packet is Benign."""
    if spec.scenario != BENIGN:
        raise InvalidScenario(f"gen_benign called with a {spec.scenario} scenario")
    b = _builder(spec, trace_index)
    _benign_session(b, spec, detach=True)
    return b.build(spec)


def gen_fbs(spec: ScenarioSpec, trace_index: int) -> Trace:
    """
    Generate a benign prefix followed by an FBS luring segment.

    The fake cell broadcasts system information, accepts the UE's connection,
    answers its TAURequest with an IdentityRequest, then either rejects the
    update or drops the connection. Segment packets are labeled Fbs.
    """
    if spec.scenario != FBS or spec.attacker_level > AttackerLevel.CLONED_CELL:
        raise InvalidScenario(f"gen_fbs needs an Fbs scenario at level 0-2, got {spec.scenario} "
                              f"at level {int(spec.attacker_level)}")
    b = _builder(spec, trace_index)
    serving = _benign_session(b, spec, detach=False)
    fake = b.catalogue.fake_cell(spec.attacker_level, serving, b.rng)

    for kind in ("systemInformationBlockType1", "systemInformation", "rrcConnectionRequest",
                 "rrcConnectionSetup", "rrcConnectionSetupComplete"):
        b.emit(RRC, kind, FBS, fake)
    b.emit(NAS, "TAURequest", FBS, fake)
    b.emit(RRC, "dlInformationTransfer", FBS, fake)
    b.emit(NAS, "IdentityRequest", FBS, fake)
    b.emit(RRC, "ulInformationTransfer", FBS, fake)
    b.emit(NAS, "IdentityResponse", FBS, fake)
    if b.rng.random() < 0.5:
        b.emit(RRC, "dlInformationTransfer", FBS, fake)
        b.emit(NAS, "TAUReject", FBS, fake, {"nas_eps_emm_cause": FBS_REJECT_CAUSES})
        b.emit(RRC, "rrcConnectionRelease", FBS, fake)
    return b.build(spec)


def gen_msa(spec: ScenarioSpec, trace_index: int) -> Trace:
    """
    Generate a benign prefix, the FBS hook, and the registered attack script.

    Level 4 traces are generated at level 3 and then reshaped.

    Raises:
        UnregisteredAttack: no script for the scenario's attack
    """
    if spec.scenario.kind != LabelKind.MSA:
        raise InvalidScenario(f"gen_msa called with a {spec.scenario} scenario")
    catalogue = get_catalogue()
    script = catalogue.script_for(spec.scenario.attack)
    b = _builder(spec, trace_index)

    serving = _benign_session(b, spec, detach=False)
    b.emit(RRC, "rrcConnectionRelease", BENIGN, serving)
    fake = catalogue.fake_cell(spec.attacker_level, serving, b.rng)
    b.emit(RRC, "systemInformationBlockType1", BENIGN, fake)
    if "connected" in script.preconditions:
        for kind in ("rrcConnectionRequest", "rrcConnectionSetup", "rrcConnectionSetupComplete"):
            b.emit(RRC, kind, BENIGN, fake)

    attack_label = Label.msa(spec.scenario.attack)
    for step in script.steps:
        b.emit(step.layer, step.kind, attack_label if step.is_attack else BENIGN, fake, step.fields)

    trace = b.build(spec, level=AttackerLevel.MULTI_STEP)
    if spec.attacker_level == AttackerLevel.RESHAPING:
        trace = reshape(trace, mix_seed(trace.seed, RESHAPE_STREAM))
    return trace


def gen_trace(spec: ScenarioSpec, trace_index: int) -> Trace:
    kind = spec.scenario.kind
    if kind == LabelKind.BENIGN:
        return gen_benign(spec, trace_index)
    if kind == LabelKind.FBS:
        return gen_fbs(spec, trace_index)
    return gen_msa(spec, trace_index)


# ---------------------------------------------------------------------------
# Level-4 reshaping
# ---------------------------------------------------------------------------

def _mutate(packet: Packet, catalogue: Catalogue, rng: np.random.Generator) -> Packet:
    table = catalogue.non_critical[packet.layer]
    fields = dict(packet.fields)
    for name, pool in table.get(packet.kind.name, {}).items():
        fields[name] = _draw_other(rng, pool, fields.get(name))
    for name, pool in table.get("*", {}).items():
        if rng.random() < 0.5:
            fields[name] = _draw_other(rng, pool, fields.get(name))
    return replace(packet, fields=fields)


def _injection_run(anchor: Packet, catalogue: Catalogue, rng: np.random.Generator) -> List[Packet]:
    layer = anchor.layer
    spec = catalogue.injection[layer]
    length = 1 + int(rng.integers(3))
    kinds = [spec["opener"]] if "opener" in spec else []
    while len(kinds) < length:
        kinds.append(_draw(rng, spec["pool"]))

    cell_fields = {name: anchor.fields.get(name) for name in CELL_FIELDS[layer]}
    run = []
    for kind in kinds:
        fields = catalogue.render_fields(layer, kind, cell_fields, rng, header=0 if layer == NAS else None)
        run.append(Packet(anchor.trace_id, anchor.seq, layer, message_kind(layer, kind), fields, BENIGN))
    return run


def reshape(trace: Trace, seed: int) -> Trace:
    """
    Rewrite an attack trace the way an adaptive attacker would.

    (a) every attack packet gets its non-critical fields rewritten (cause codes,
        optional elements, reserved header values); kinds never change.
    (b) a run of 1..3 benign messages is injected right before the first attack
        packet of each layer; injected packets are labeled Benign.

    Sequence numbers are renumbered; Msa traces move to attacker level 4.

    Raises:
        NotAnAttackTrace: the trace's scenario is Benign
    """
    if not trace.scenario.is_attack:
        raise NotAnAttackTrace(f"{trace.trace_id} is a {trace.scenario} trace; nothing to reshape")
    catalogue = get_catalogue()
    rng = np.random.default_rng(seed)

    mutated = [_mutate(p, catalogue, rng) if p.label.is_attack else p for p in trace.packets]
    reshaped: List[Packet] = []
    injected = set()
    for packet in mutated:
        if packet.label.is_attack and packet.layer not in injected:
            reshaped.extend(_injection_run(packet, catalogue, rng))
            injected.add(packet.layer)
        reshaped.append(packet)

    level = AttackerLevel.RESHAPING if trace.scenario.kind == LabelKind.MSA else trace.attacker_level
    return replace(
        trace,
        attacker_level=level,
        packets=tuple(replace(p, seq=i) for i, p in enumerate(reshaped)),
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    traces: List[Trace]
    manifest: ManifestRecord


def build_manifest(traces: Sequence[Trace], specs: Sequence[ScenarioSpec]) -> ManifestRecord:
    per_class = Counter(str(t.scenario) for t in traces)
    per_label = Counter(str(p.label) for t in traces for p in t.packets)
    return ManifestRecord(
        n_traces=len(traces),
        traces_per_class=dict(sorted(per_class.items())),
        packets_per_label=dict(sorted(per_label.items())),
        scenarios=[spec.to_dict() for spec in specs],
        trace_ids=[t.trace_id for t in traces],
    )


async def _generate_concurrently(jobs: List[Tuple[ScenarioSpec, int]], workers: int) -> List[Trace]:
    semaphore = asyncio.Semaphore(workers)

    async def run(spec: ScenarioSpec, index: int) -> Trace:
        async with semaphore:
            return await asyncio.to_thread(gen_trace, spec, index)

    return list(await asyncio.gather(*(run(spec, index) for spec, index in jobs)))


def gen_dataset(specs: Sequence[ScenarioSpec], workers: int = DEFAULT_WORKERS) -> Dataset:
    """
    Generate every trace of every spec, in manifest order.

    Trace i (counted across all specs) is seeded with mix_seed(master_seed, i),
    so the output does not depend on `workers`.
    """
    jobs: List[Tuple[ScenarioSpec, int]] = []
    for spec in specs:
        for _ in range(spec.n_traces):
            jobs.append((spec, len(jobs)))
    if not jobs:
        raise InvalidScenario("No traces requested")

    get_catalogue()
    logger.info(f"🛰️ Generating {len(jobs)} traces from {len(specs)} scenario(s) with {workers} worker(s)")
    if workers > 1:
        traces = asyncio.run(_generate_concurrently(jobs, workers))
    else:
        traces = [gen_trace(spec, index) for spec, index in jobs]

    manifest = build_manifest(traces, specs)
    logger.info(f"✅ Generated {manifest.n_traces} traces: {manifest.traces_per_class}")
    return Dataset(traces, manifest)
