"""Independent brute-force oracles the engine is checked against.

These deliberately re-derive behavior from the stated rules rather than
calling into the package, so a bug cannot hide on both sides of a check.
"""

from __future__ import annotations

RESPONSE_SLOTS = [(1, "NMA"), (1, "GHA"), (2, "NMA"), (2, "GHA")]


def interpret_schedule(slots: list[str], max_rounds: int):
    """Walk response slots in speaking order and apply the termination rules.

    ``slots`` holds one of {maintain, concede, fail} per response slot in the
    order NMA, GHA per round. Returns (kind, value, rounds_used).
    """
    order = RESPONSE_SLOTS[: 2 * max_rounds]
    assert len(slots) == len(order)
    for (round_number, agent), behavior in zip(order, slots):
        if behavior == "maintain":
            continue
        value = +1 if agent == "NMA" else -1
        return ("resolved", value, round_number)
    return ("unresolved", None, max_rounds)


def reference_verdict_oracle(signals, dead_band: int = 0):
    """Re-derive the aggregation rule: (label, confidence, supporting-sorted).

    ``signals`` is a list of ("r", trace_id, vote) and ("u", trace_id, gap).
    """
    signs = []
    for kind, trace_id, value in signals:
        if kind == "r":
            signs.append((trace_id, value))
        else:
            if value > dead_band:
                signs.append((trace_id, 1))
            elif value < -dead_band:
                signs.append((trace_id, -1))
            else:
                signs.append((trace_id, 0))
    score = sum(s for _, s in signs)
    label = "fake" if score > 0 else "real"
    label_sign = 1 if label == "fake" else -1
    supporting = sorted(t for t, s in signs if s == label_sign)
    if not signs:
        return ("real", 0.5, [])
    confidence = sum(1 for _, s in signs if s == label_sign) / len(signs)
    if score == 0:
        confidence = max(confidence, 0.5)
    return (label, confidence, supporting)


def confusion_metrics(predictions, labels):
    """Plain confusion-matrix arithmetic with fake as the positive class."""
    tp = sum(1 for p, y in zip(predictions, labels) if p == "fake" and y == "fake")
    fp = sum(1 for p, y in zip(predictions, labels) if p == "fake" and y == "real")
    fn = sum(1 for p, y in zip(predictions, labels) if p == "real" and y == "fake")
    tn = sum(1 for p, y in zip(predictions, labels) if p == "real" and y == "real")
    acc = (tp + tn) / len(labels)
    if tp == 0 and fp == 0 and fn == 0:
        return acc, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return acc, 0.0
    return acc, 2 * precision * recall / (precision + recall)
