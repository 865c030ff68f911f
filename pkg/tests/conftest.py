from __future__ import annotations

import json
import math
from pathlib import Path

import pytest

# 1x1 transparent PNG; the engine never decodes frames, but sources on disk
# should still look like real extractions.
PNG_BYTES = (
    b"\x89PNG\r\n\x1a\n\x00\x00\x00\rIHDR\x00\x00\x00\x01\x00\x00\x00\x01"
    b"\x08\x06\x00\x00\x00\x1f\x15\xc4\x89\x00\x00\x00\rIDATx\x9cc\xfc\xff"
    b"\xff?\x00\x05\xfe\x02\xfe\xa75\x81\x84\x00\x00\x00\x00IEND\xaeB`\x82"
)


def write_frame_dir(
    directory: Path, duration_seconds: float, fps: float, extra_frames: int = 0
) -> Path:
    """Create a pre-extracted source directory with meta.json and frames."""
    directory.mkdir(parents=True, exist_ok=True)
    count = max(1, math.floor(fps * duration_seconds)) + extra_frames
    for k in range(count):
        (directory / f"frame_{k:06d}.png").write_bytes(PNG_BYTES)
    (directory / "meta.json").write_text(
        json.dumps({"duration_seconds": duration_seconds, "fps": fps}),
        encoding="utf-8",
    )
    return directory


@pytest.fixture
def frame_dir(tmp_path):
    return write_frame_dir(tmp_path / "clip", duration_seconds=1.0, fps=3.0)
