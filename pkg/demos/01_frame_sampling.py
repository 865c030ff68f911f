"""Frame sampling plans and key-frame selection.

The engine samples frames uniformly at a configured rate: a clip of
duration S seconds at n fps yields max(1, floor(n * S)) mid-interval
timestamps, every one strictly below the duration. The key frame for scene
understanding is the middle frame.
"""

import math
import random

from dvar.evidence import sample_frames

print("== default rate: 10 s at 5 fps ==")
plan = sample_frames(10.0, 5)
print(f"frames: {len(plan)}")
print(f"first five timestamps: {[round(t, 2) for t in plan[:5]]}")
print(f"last timestamp: {plan[-1]:.2f} (duration 10.0)")

print("\n== fractional products floor ==")
plan = sample_frames(4.5, 5)
print(f"4.5 s at 5 fps -> {len(plan)} frames (floor of 22.5), last at {plan[-1]:.2f}")

print("\n== very short clips clamp to one mid-clip frame ==")
plan = sample_frames(0.1, 5)
print(f"0.1 s at 5 fps -> {len(plan)} frame at t={plan[0]:.3f}")

print("\n== the sampling law holds across random (duration, fps) pairs ==")
rng = random.Random(0)
checked = 0
for _ in range(5000):
    duration = rng.uniform(1e-3, 30.0)
    fps = rng.uniform(1e-2, 10.0)
    stamps = sample_frames(duration, fps)
    assert len(stamps) == max(1, math.floor(fps * duration))
    assert all(t < duration for t in stamps)
    checked += 1
print(f"verified count and bound on {checked} random pairs")

print("\n== key frame is the middle frame ==")
for count in (1, 7, 50):
    print(f"T={count:>3} -> key frame index {count // 2}")
