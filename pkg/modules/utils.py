import csv
import datetime
import json
import logging
import os
import struct
import sys
import uuid
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.errors import FormatError

APP_LOGGER_NAME = "scl"


def build_file_path(path: str) -> str:
    """Make sure the parent directory of `path` exists and return it unchanged."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def build_file_name_session(name: str, session_id: str, log_dir: str) -> str:
    session_dir = f"{log_dir}/{session_id}"
    os.makedirs(session_dir, exist_ok=True)
    return os.path.join(session_dir, f"{name}")


def to_json_file_pretty(path: str, content: Union[Dict, List]):
    def default_serializer(obj):
        if hasattr(obj, "model_dump"):
            return obj.model_dump()
        if isinstance(obj, np.generic):
            return obj.item()
        raise TypeError(
            f"Object of type {obj.__class__.__name__} is not JSON serializable"
        )

    with open(build_file_path(path), "w") as outfile:
        json.dump(content, outfile, indent=2, default=default_serializer)
        outfile.write("\n")


def format_float(value: float) -> str:
    """Six significant digits, `.` decimal separator, independent of locale."""
    return f"{float(value):.6g}"


def write_csv(path: str, header: Optional[Sequence[str]], rows: Iterable[Sequence]):
    """Comma-separated rows; `header=None` writes the rows alone."""
    with open(build_file_path(path), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        for row in rows:
            writer.writerow(
                [format_float(v) if isinstance(v, (float, np.floating)) else v for v in row]
            )


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed of `seed` for the integer path `keys`."""
    sequence = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def create_session_logger_id() -> str:
    return (
        datetime.datetime.now().strftime("%Y%m%d-%H%M%S") + "-" + uuid.uuid4().hex[:6]
    )


def get_logger() -> logging.Logger:
    return logging.getLogger(APP_LOGGER_NAME)


def setup_logging(
    session_id: str, log_dir: Optional[str] = None, level: Union[int, str] = logging.INFO
):
    """Configure the application logger: stderr always, a session log file when `log_dir` is set"""
    logger = logging.getLogger(APP_LOGGER_NAME)
    logger.setLevel(level)

    # Clear any existing handlers to avoid duplicates
    logger.handlers.clear()
    logger.propagate = False

    class EmojiFormatter(logging.Formatter):
        EMOJI_MAP = {
            logging.INFO: "ℹ️",
            logging.WARNING: "⚠️",
            logging.ERROR: "❌",
            logging.CRITICAL: "🔥",
            logging.DEBUG: "🐛",
        }

        def format(self, record):
            emoji = self.EMOJI_MAP.get(record.levelno, "📝")
            self._style._fmt = f"{emoji} %(asctime)s - %(levelname)s - %(message)s"
            return super().format(record)

    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setFormatter(EmojiFormatter())
    logger.addHandler(stream_handler)

    if log_dir:
        log_file = build_file_name_session("session.log", session_id, log_dir)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(EmojiFormatter())
        logger.addHandler(file_handler)

    return logger


def read_header(blob: bytes, magic: bytes, kind: str) -> Tuple[dict, int]:
    """Shared magic + length-prefixed JSON header parsing; returns (header, payload offset)."""
    if len(blob) < len(magic):
        raise FormatError(f"{kind} file is too short to hold the magic bytes", len(blob))
    if blob[: len(magic)] != magic:
        raise FormatError(
            f"not a {kind} file: expected magic {magic!r}, found {blob[:len(magic)]!r}", 0
        )
    offset = len(magic)
    if len(blob) < offset + 4:
        raise FormatError(f"{kind} file truncated inside the header length", len(blob))
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) < offset + header_len:
        raise FormatError(
            f"{kind} header declares {header_len} bytes but only "
            f"{len(blob) - offset} remain",
            offset,
        )
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{kind} header is not valid UTF-8 JSON: {e}", offset)
    if not isinstance(header, dict):
        raise FormatError(f"{kind} header must be a JSON object", offset)
    return header, offset + header_len


def write_header(f, magic: bytes, header: dict):
    """Magic bytes, u32 LE length, then the header as sorted UTF-8 JSON."""
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<I", len(header_bytes)))
    f.write(header_bytes)
