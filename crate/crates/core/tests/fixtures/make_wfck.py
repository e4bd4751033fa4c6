"""Writes the WFCK fixtures byte by byte, independently of the Rust encoder."""
import json
import struct
from pathlib import Path

HERE = Path(__file__).parent


def tensor(name, shape, values):
    out = struct.pack("<H", len(name)) + name.encode()
    out += struct.pack("<BB", 0, len(shape))
    out += b"".join(struct.pack("<I", e) for e in shape)
    out += b"".join(struct.pack("<f", v) for v in values)
    return out


meta = json.dumps(
    {"model_id": "vgg7", "epoch": 4, "seed": 42, "config_digest": "00ff"},
    separators=(",", ":"),
).encode()

body = b"WFCK" + struct.pack("<II", 1, 2)
body += tensor("w", [2, 3], [0.5, -1.25, 2.0, 0.0, 3.75, -0.125])
body += tensor("b", [2], [1.0, -2.5])
body += struct.pack("<I", len(meta)) + meta

(HERE / "tiny.wfck").write_bytes(body)
(HERE / "truncated.wfck").write_bytes(body[:30])
(HERE / "bad_magic.wfck").write_bytes(b"WFCX" + body[4:])
