import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Union

from app.config import FORMAT_VERSION
from app.errors import ArtifactIOError, FormatVersionMismatch, RecordDecodeError

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    """One round of the SplitMix64 finalizer over a 64-bit integer."""
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix_seed(master_seed: int, index: int) -> int:
    """
    Derive the seed of item `index` from a master seed.

    seed = splitmix64(splitmix64(master_seed) XOR index), all arithmetic mod 2^64.
    Neighbouring indices land far apart, so per-item streams are independent.
    """
    return splitmix64(splitmix64(master_seed & MASK64) ^ (index & MASK64))


def dumps_canonical(record: Dict[str, Any]) -> str:
    """Compact JSON; key order is the caller's insertion order."""
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


def write_json(path: str, payload: Dict[str, Any]) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise ArtifactIOError(f"Could not write {path}: {e}") from e


def read_json(path: str, expected_type: str = None) -> Dict[str, Any]:
    """
    Read a versioned JSON artifact.

    Args:
        path: file to read
        expected_type: when set, the artifact's model_type must match

    Raises:
        ArtifactIOError: missing or unreadable file
        RecordDecodeError: not JSON
        FormatVersionMismatch: wrong format_version or model_type
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError as e:
        raise ArtifactIOError(f"File not found: {path}") from e
    except OSError as e:
        raise ArtifactIOError(f"Could not read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise RecordDecodeError(f"{path} is not valid JSON: {e}") from e

    check_format_version(payload, path)
    if expected_type is not None and payload.get("model_type") != expected_type:
        raise FormatVersionMismatch(
            f"{path}: expected model_type {expected_type}, found {payload.get('model_type')}"
        )
    return payload


def check_format_version(payload: Dict[str, Any], source: str = "artifact") -> None:
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"{source}: format_version {version} is not supported (expected {FORMAT_VERSION})"
        )


def write_lines(path: str, lines: Iterable[str]) -> int:
    count = 0
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
                count += 1
    except OSError as e:
        raise ArtifactIOError(f"Could not write {path}: {e}") from e
    return count


def decode_line(raw: Union[bytes, str], line_no: int = 0) -> str:
    """
    UTF-8 text of one input line.

    Raises:
        RecordDecodeError: the bytes are not valid UTF-8
    """
    if isinstance(raw, str):
        return raw
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise RecordDecodeError(f"line {line_no}: not UTF-8 ({e.reason} at byte {e.start})") from e


def iter_lines(path: str) -> Iterator[str]:
    """
    Yield the non-blank lines of a UTF-8 text file.

    Raises:
        ArtifactIOError: the file cannot be read
        RecordDecodeError: a line is not valid UTF-8
    """
    try:
        with open(path, "rb") as f:
            for line_no, raw in enumerate(f, start=1):
                line = decode_line(raw, line_no)
                if line.strip():
                    yield line
    except FileNotFoundError as e:
        raise ArtifactIOError(f"File not found: {path}") from e
    except OSError as e:
        raise ArtifactIOError(f"Could not read {path}: {e}") from e
