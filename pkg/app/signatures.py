#!/usr/bin/env python3
"""
Signature baselines for eight attacks, each in three representations.

Every signature rule from app/data/signatures.json compiles to:
- a total DFA over the layer's message kinds (detects on entering an accepting state)
- a Mealy machine over the same transitions (alarm is the output of the transition)
- a past-time LTL formula, monitored left to right with one value per subformula

Rule types:
    message           kind == K
    without_previous  kind == K and not Y(kind == P)
    unprotected       kind == K and ((not kind == S) Since (kind == O))

Formulas are nested tuples:
    ("true",) ("kind", K) ("field", name, value) ("not", f) ("and", f, g)
    ("or", f, g) ("Y", f) ("O", f) ("H", f) ("S", f, g)
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

from app.config import load_config_file, load_data_file
from app.core_model import (
    AttackKind,
    AttackerLevel,
    Label,
    Layer,
    Packet,
    Trace,
    VOCABULARY,
    attack_by_id,
    message_kind,
    split_layer,
)
from app.errors import RecordDecodeError
from app.utils import check_format_version

logger = logging.getLogger(__name__)

Formula = Tuple[Any, ...]
PacketsLike = Union[Trace, Sequence[Packet]]

REPRESENTATIONS = ("dfa", "mealy", "pltl")
BENIGN_OUTPUT = "benign"
ALARM_OUTPUT = "alarm"

_STATE_COUNT = {"message": 2, "without_previous": 3, "unprotected": 3}


def _packets(trace: PacketsLike) -> Sequence[Packet]:
    return trace.packets if isinstance(trace, Trace) else trace


# ---------------------------------------------------------------------------
# Automata
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DfaSignature:
    attack: AttackKind
    alphabet: Tuple[str, ...]
    n_states: int
    transitions: Dict[Tuple[int, str], int]
    accepting: FrozenSet[int]
    start: int = 0

    def step(self, state: int, symbol: str) -> int:
        # symbols outside the alphabet self-loop
        return self.transitions.get((state, symbol), state)


@dataclass(frozen=True)
class MealySignature:
    dfa: DfaSignature
    outputs: Dict[Tuple[int, str], str]

    @property
    def attack(self) -> AttackKind:
        return self.dfa.attack

    def step(self, state: int, symbol: str) -> Tuple[int, str]:
        return self.dfa.step(state, symbol), self.outputs.get((state, symbol), BENIGN_OUTPUT)


def _rule_next(rule: Dict[str, str]) -> Callable[[int, str], int]:
    """Transition function of a rule; state n_states - 1 is the absorbing alarm state."""
    rule_type = rule["type"]
    k = rule["kind"]

    if rule_type == "message":
        return lambda state, sym: 1 if state == 1 or sym == k else 0

    if rule_type == "without_previous":
        p = rule["previous"]

        def step(state: int, sym: str) -> int:
            if state == 2:
                return 2
            if sym == k and state == 0:
                return 2
            return 1 if sym == p else 0
        return step

    if rule_type == "unprotected":
        opener, guard = rule["opened_by"], rule["protected_by"]

        def step(state: int, sym: str) -> int:
            if state == 2:
                return 2
            if sym == opener:
                return 1
            if state == 1 and sym == k:
                return 2
            if sym == guard:
                return 0
            return state
        return step

    raise RecordDecodeError(f"Unknown signature rule type {rule_type!r}")


def compile_dfa(rule: Dict[str, str], attack: AttackKind, layer: Layer) -> DfaSignature:
    alphabet = VOCABULARY[layer]
    n_states = _STATE_COUNT[rule["type"]]
    step = _rule_next(rule)
    transitions = {(s, sym): step(s, sym) for s in range(n_states) for sym in alphabet}
    return DfaSignature(attack, alphabet, n_states, transitions, frozenset({n_states - 1}))


def compile_mealy(dfa: DfaSignature) -> MealySignature:
    outputs = {
        (s, sym): ALARM_OUTPUT if target in dfa.accepting and s not in dfa.accepting else BENIGN_OUTPUT
        for (s, sym), target in dfa.transitions.items()
    }
    return MealySignature(dfa, outputs)


def compile_pltl(rule: Dict[str, str]) -> Formula:
    k = ("kind", rule["kind"])
    if rule["type"] == "message":
        return k
    if rule["type"] == "without_previous":
        return ("and", k, ("not", ("Y", ("kind", rule["previous"]))))
    if rule["type"] == "unprotected":
        return ("and", k, ("S", ("not", ("kind", rule["protected_by"])), ("kind", rule["opened_by"])))
    raise RecordDecodeError(f"Unknown signature rule type {rule['type']!r}")


def eval_dfa(sig: DfaSignature, trace: PacketsLike) -> Tuple[bool, Optional[int]]:
    """(detected, index of the packet whose transition enters an accepting state)."""
    state = sig.start
    for i, packet in enumerate(_packets(trace)):
        state = sig.step(state, packet.kind.name)
        if state in sig.accepting:
            return True, i
    return False, None


def eval_mealy(sig: MealySignature, trace: PacketsLike) -> Tuple[bool, Optional[int]]:
    state = sig.dfa.start
    for i, packet in enumerate(_packets(trace)):
        state, output = sig.step(state, packet.kind.name)
        if output == ALARM_OUTPUT:
            return True, i
    return False, None


# ---------------------------------------------------------------------------
# Past-time LTL
# ---------------------------------------------------------------------------

_UNARY = {"not", "Y", "O", "H"}
_BINARY = {"and", "or", "S"}


def subformulas(formula: Formula) -> List[Formula]:
    """Distinct subformulas in post-order (children before parents)."""
    ordered: "OrderedDict[Formula, None]" = OrderedDict()

    def visit(f: Formula) -> None:
        op = f[0]
        if op in _UNARY:
            visit(f[1])
        elif op in _BINARY:
            visit(f[1])
            visit(f[2])
        elif op not in ("true", "kind", "field"):
            raise RecordDecodeError(f"Unknown formula operator {op!r}")
        ordered.setdefault(f, None)

    visit(formula)
    return list(ordered)


def _atom(f: Formula, packet: Packet) -> bool:
    op = f[0]
    if op == "true":
        return True
    if op == "kind":
        return packet.kind.name == f[1]
    return packet.fields.get(f[1]) == f[2]


class PltlMonitor:
    """Incremental monitor: constant state per step, one boolean per subformula."""

    def __init__(self, formula: Formula):
        self.formula = formula
        self._order = subformulas(formula)
        self._prev: Optional[Dict[Formula, bool]] = None

    def reset(self) -> None:
        self._prev = None

    def step(self, packet: Packet) -> bool:
        prev = self._prev
        now: Dict[Formula, bool] = {}
        for f in self._order:
            op = f[0]
            if op == "not":
                value = not now[f[1]]
            elif op == "and":
                value = now[f[1]] and now[f[2]]
            elif op == "or":
                value = now[f[1]] or now[f[2]]
            elif op == "Y":
                value = prev is not None and prev[f[1]]
            elif op == "O":
                value = now[f[1]] or (prev is not None and prev[f])
            elif op == "H":
                value = now[f[1]] and (prev is None or prev[f])
            elif op == "S":
                value = now[f[2]] or (now[f[1]] and prev is not None and prev[f])
            else:
                value = _atom(f, packet)
            now[f] = value
        self._prev = now
        return now[self.formula]


def eval_pltl(formula: Formula, trace: PacketsLike) -> Tuple[List[bool], bool]:
    """Per-step satisfaction and the verdict (true iff the formula holds at some step)."""
    monitor = PltlMonitor(formula)
    steps = [monitor.step(p) for p in _packets(trace)]
    return steps, any(steps)


def holds(formula: Formula, packets: Sequence[Packet], i: int) -> bool:
    """Satisfaction at step i recomputed from scratch over packets[0..i]."""
    op = formula[0]
    if op == "not":
        return not holds(formula[1], packets, i)
    if op == "and":
        return holds(formula[1], packets, i) and holds(formula[2], packets, i)
    if op == "or":
        return holds(formula[1], packets, i) or holds(formula[2], packets, i)
    if op == "Y":
        return i > 0 and holds(formula[1], packets, i - 1)
    if op == "O":
        return any(holds(formula[1], packets, j) for j in range(i + 1))
    if op == "H":
        return all(holds(formula[1], packets, j) for j in range(i + 1))
    if op == "S":
        return any(
            holds(formula[2], packets, j) and all(holds(formula[1], packets, m) for m in range(j + 1, i + 1))
            for j in range(i + 1)
        )
    return _atom(formula, packets[i])


def formula_to_str(formula: Formula) -> str:
    op = formula[0]
    if op == "true":
        return "true"
    if op == "kind":
        return f"kind=={formula[1]}"
    if op == "field":
        return f"{formula[1]}=={formula[2]!r}"
    if op == "not":
        return f"!{formula_to_str(formula[1])}"
    if op in ("Y", "O", "H"):
        return f"{op}({formula_to_str(formula[1])})"
    symbol = {"and": "&", "or": "|", "S": "S"}[op]
    return f"({formula_to_str(formula[1])} {symbol} {formula_to_str(formula[2])})"


# ---------------------------------------------------------------------------
# Catalogue of signatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    name: str
    attack: AttackKind
    layer: Layer
    rule: Dict[str, str] = field(hash=False, compare=False)
    dfa: DfaSignature = field(hash=False, compare=False)
    mealy: MealySignature = field(hash=False, compare=False)
    formula: Formula = field(hash=False, compare=False)

    def detect(self, representation: str, trace: Trace) -> Tuple[bool, Optional[int]]:
        """
        Run one representation over the signature's layer of a trace.

        Returns:
            (detected, seq of the firing packet)
        """
        packets = split_layer(trace, self.layer).packets if isinstance(trace, Trace) else trace
        if representation == "dfa":
            detected, index = eval_dfa(self.dfa, packets)
        elif representation == "mealy":
            detected, index = eval_mealy(self.mealy, packets)
        elif representation == "pltl":
            steps, detected = eval_pltl(self.formula, packets)
            index = steps.index(True) if detected else None
        else:
            raise ValueError(f"Unknown representation {representation!r}")
        return detected, packets[index].seq if detected else None


def parse_signature(entry: Dict[str, Any]) -> Signature:
    try:
        layer = Layer(entry["layer"])
        attack = attack_by_id(entry["attack"])
        rule = dict(entry["rule"])
        for key in ("kind", "previous", "opened_by", "protected_by"):
            if key in rule:
                message_kind(layer, rule[key])
        dfa = compile_dfa(rule, attack, layer)
        return Signature(entry["name"], attack, layer, rule, dfa, compile_mealy(dfa), compile_pltl(rule))
    except (KeyError, TypeError, ValueError) as e:
        raise RecordDecodeError(f"Malformed signature entry {entry!r}: {e}") from e


def load_signatures(path: Optional[str] = None) -> List[Signature]:
    if path is None:
        payload = load_data_file("signatures.json")
    else:
        payload = load_config_file(path)
    check_format_version(payload, path or "signatures.json")
    signatures = [parse_signature(entry) for entry in payload.get("signatures", [])]
    logger.info(f"✅ Loaded {len(signatures)} signatures")
    return signatures


_signatures: Optional[List[Signature]] = None


def get_signatures() -> List[Signature]:
    """Get or create the shipped signature catalogue."""
    global _signatures
    if _signatures is None:
        _signatures = load_signatures()
    return _signatures


@dataclass(frozen=True)
class SignatureHit:
    signature: Signature
    seq: int

    @property
    def label(self) -> Label:
        return Label.msa(self.signature.attack)


def classify_with_signatures(signatures: Sequence[Signature], representation: str,
                             trace: Trace) -> Optional[SignatureHit]:
    """Earliest firing signature by packet seq; ties go to catalogue order."""
    best: Optional[SignatureHit] = None
    for signature in signatures:
        detected, seq = signature.detect(representation, trace)
        if detected and (best is None or seq < best.seq):
            best = SignatureHit(signature, seq)
    return best


# ---------------------------------------------------------------------------
# Evasion study
# ---------------------------------------------------------------------------

def _rate(hits: int, n: int) -> Optional[float]:
    return hits / n if n else None


def evasion_report(traces: Sequence[Trace], signatures: Optional[Sequence[Signature]] = None,
                   classifier: Optional[Callable[[Trace], Label]] = None) -> Dict[str, Any]:
    """
    Detection rates of every representation on original vs reshaped traces.

    A trace counts as detected only when the earliest firing signature belongs
    to the trace's own attack. Traces at attacker level 4 are the reshaped
    set; lower levels are the originals. When a classifier is given it is run
    on the same traces as a companion column.

    Returns:
        {"attacks": {attack_id: {"name", "original": {...}, "reshaped": {...}}}}
    """
    signatures = list(signatures) if signatures is not None else get_signatures()
    covered = OrderedDict((s.attack.id, s.attack) for s in signatures)
    report: Dict[str, Any] = {"representations": list(REPRESENTATIONS), "attacks": {}}

    for attack_id, attack in covered.items():
        own = Label.msa(attack)
        groups = {"original": [], "reshaped": []}
        for trace in traces:
            if trace.scenario == own:
                key = "reshaped" if trace.attacker_level == AttackerLevel.RESHAPING else "original"
                groups[key].append(trace)

        entry: Dict[str, Any] = {"name": attack.name}
        for key, group in groups.items():
            stats: Dict[str, Any] = {"n": len(group)}
            for representation in REPRESENTATIONS:
                hits = 0
                for trace in group:
                    hit = classify_with_signatures(signatures, representation, trace)
                    hits += int(hit is not None and hit.label == own)
                stats[representation] = _rate(hits, len(group))
            if classifier is not None:
                stats["graph"] = _rate(sum(int(classifier(t) == own) for t in group), len(group))
            entry[key] = stats
        report["attacks"][str(attack_id)] = entry
        logger.info(f"📊 Attack {attack_id}: original dfa={entry['original']['dfa']} "
                    f"reshaped dfa={entry['reshaped']['dfa']}"
                    + (f" graph={entry['reshaped'].get('graph')}" if classifier else ""))
    return report
