"""
Wire schemas (pydantic) and the canonical Trace JSONL codec.

One trace per line:
{"trace_id","scenario","attack","attacker_level","seed","mobility",
 "packets":[{"seq","layer","kind","fields":{...},"label"}]}
"""

import json
import logging
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from app.config import FORMAT_VERSION
from app.core_model import (
    AttackerLevel,
    BENIGN,
    FBS,
    Label,
    Layer,
    Packet,
    Trace,
    message_kind,
)
from app.errors import InvalidLabel, RecordDecodeError, UnknownAttack, UnknownMessageKind
from app.utils import dumps_canonical, iter_lines, write_lines

logger = logging.getLogger(__name__)


class PacketRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seq: int = Field(ge=0)
    layer: Literal["NAS", "RRC"]
    kind: str
    fields: Dict[str, Union[int, str, None]] = Field(default_factory=dict)
    label: str


class TraceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trace_id: str
    scenario: Literal["Benign", "Fbs", "Msa"]
    attack: Optional[int] = None
    attacker_level: int = Field(ge=0, le=4)
    seed: int = Field(ge=0, lt=2 ** 64)
    mobility: bool
    packets: List[PacketRecord]


class LayerVerdictRecord(BaseModel):
    label: str
    confidence: float
    per_packet: Optional[List[float]] = None
    overlap: Optional[float] = None
    variant: Optional[bool] = None


class FusionRecord(BaseModel):
    winner: Literal["NAS", "RRC"]
    w_nas: float
    w_rrc: float


class VerdictRecord(BaseModel):
    format_version: int = FORMAT_VERSION
    trace_id: str
    task: Literal["fbs", "msa"]
    label: str
    confidence: float
    layers: Dict[str, LayerVerdictRecord]
    fusion: Optional[FusionRecord] = None


class ManifestRecord(BaseModel):
    format_version: int = FORMAT_VERSION
    n_traces: int
    traces_per_class: Dict[str, int]
    packets_per_label: Dict[str, int]
    scenarios: List[Dict[str, Union[str, int, float, bool, None]]]
    trace_ids: List[str]


def trace_to_record(trace: Trace) -> TraceRecord:
    scenario = trace.scenario
    return TraceRecord(
        trace_id=trace.trace_id,
        scenario=scenario.kind.value,
        attack=scenario.attack.id if scenario.attack else None,
        attacker_level=int(trace.attacker_level),
        seed=trace.seed,
        mobility=trace.mobility,
        packets=[
            PacketRecord(
                seq=p.seq,
                layer=p.layer.value,
                kind=p.kind.name,
                fields=dict(p.fields),
                label=str(p.label),
            )
            for p in trace.packets
        ],
    )


def trace_from_record(record: TraceRecord) -> Trace:
    if record.scenario == "Msa":
        if record.attack is None:
            raise RecordDecodeError(f"{record.trace_id}: Msa scenario without attack id")
        scenario = Label.msa(record.attack)
    else:
        scenario = BENIGN if record.scenario == "Benign" else FBS

    packets = []
    for p in record.packets:
        layer = Layer(p.layer)
        packets.append(Packet(
            trace_id=record.trace_id,
            seq=p.seq,
            layer=layer,
            kind=message_kind(layer, p.kind),
            fields=dict(p.fields),
            label=Label.parse(p.label),
        ))
    return Trace(
        trace_id=record.trace_id,
        scenario=scenario,
        attacker_level=AttackerLevel(record.attacker_level),
        seed=record.seed,
        mobility=record.mobility,
        packets=tuple(packets),
    )


def trace_to_line(trace: Trace) -> str:
    return dumps_canonical(trace_to_record(trace).model_dump(mode="json"))


def trace_from_line(line: str, line_no: int = 0) -> Trace:
    """
    Decode one JSONL line.

    Raises:
        RecordDecodeError: malformed JSON, schema violation, or unknown vocabulary
    """
    try:
        record = TraceRecord.model_validate(json.loads(line))
        return trace_from_record(record)
    except json.JSONDecodeError as e:
        raise RecordDecodeError(f"line {line_no}: not JSON ({e})") from e
    except PydanticValidationError as e:
        raise RecordDecodeError(f"line {line_no}: {e.error_count()} schema error(s): {e.errors()[0]['msg']}") from e
    except (InvalidLabel, UnknownAttack, UnknownMessageKind) as e:
        raise RecordDecodeError(f"line {line_no}: {e}") from e


def read_traces(path: str) -> List[Trace]:
    traces = [trace_from_line(line, i + 1) for i, line in enumerate(iter_lines(path))]
    logger.info(f"📥 Read {len(traces)} traces from {path}")
    return traces


def iter_trace_lines(lines: Iterable[str]) -> Iterator[Trace]:
    for i, line in enumerate(lines):
        if line.strip():
            yield trace_from_line(line, i + 1)


def write_traces(path: str, traces: Iterable[Trace]) -> int:
    count = write_lines(path, (trace_to_line(t) for t in traces))
    logger.info(f"💾 Wrote {count} traces to {path}")
    return count
