"""Knowledge base: ingestion, dedup, retrieval, freeze, file format."""

from __future__ import annotations

import random

import pytest

from dvar.backend import CallbackProvider, cosine_similarity, hash_embed
from dvar.knowledge import (
    AlreadyFrozenError,
    ConsistencyError,
    DuplicateEntryError,
    FrozenKBError,
    GuidanceType,
    KBIndex,
    Provenance,
    entry_text,
    load_kb,
    reactive_diagnose,
    retrieve,
    save_kb,
)

STAMP = "2026-01-05T00:00:00Z"


def seeded_kb(entries, verified=True) -> KBIndex:
    kb = KBIndex()
    for phenomenon, description, gtype in entries:
        kb.add_entry(
            phenomenon=phenomenon,
            description=description,
            guidance_type=gtype,
            verified=verified,
            created_at=STAMP,
        )
    return kb


BASIC_ENTRIES = [
    (
        "temporal flicker",
        "High-frequency luminance oscillation across consecutive frames in static regions.",
        "positive",
    ),
    (
        "non-rigid deformation",
        "Object silhouettes bend or melt between frames without an acting force.",
        "positive",
    ),
    (
        "camera motion blur",
        "Whole-frame streaking from fast panning is routine in handheld footage.",
        "negative",
    ),
]


class TestAddEntry:
    def test_valid_entry_gets_id(self):
        kb = KBIndex()
        entry_id = kb.add_entry(
            phenomenon="temporal flicker",
            description="Luminance oscillates frame to frame in regions that should stay static.",
            guidance_type="positive",
            created_at=STAMP,
        )
        assert entry_id.startswith("kb-")
        assert len(kb) == 1

    def test_empty_phenomenon(self):
        kb = KBIndex()
        with pytest.raises(ConsistencyError, match="phenomenon"):
            kb.add_entry(phenomenon="", description="x" * 30, guidance_type="positive")

    def test_description_bounds(self):
        kb = KBIndex()
        with pytest.raises(ConsistencyError, match="too short"):
            kb.add_entry(phenomenon="p", description="short", guidance_type="positive")
        with pytest.raises(ConsistencyError, match="too long"):
            kb.add_entry(phenomenon="p", description="x" * 2001, guidance_type="negative")

    def test_invalid_guidance_type(self):
        kb = KBIndex()
        with pytest.raises(ConsistencyError, match="guidance_type"):
            kb.add_entry(phenomenon="p", description="x" * 30, guidance_type="sideways")

    def test_punctuation_only_variant_is_duplicate(self):
        kb = seeded_kb(BASIC_ENTRIES)
        original = kb.entries[0]
        # same tokens, trailing punctuation only: hash embedding is identical
        variant_desc = BASIC_ENTRIES[0][1] + " "
        assert (
            cosine_similarity(
                hash_embed(entry_text("temporal flicker", variant_desc)),
                original.embedding,
            )
            == pytest.approx(1.0)
        )
        with pytest.raises(DuplicateEntryError) as err:
            kb.add_entry(
                phenomenon="temporal flicker",
                description=variant_desc,
                guidance_type="positive",
            )
        assert err.value.existing_id == original.entry_id

    def test_same_text_different_type_not_duplicate(self):
        kb = seeded_kb(BASIC_ENTRIES[:1])
        kb.add_entry(
            phenomenon=BASIC_ENTRIES[0][0],
            description=BASIC_ENTRIES[0][1],
            guidance_type="negative",
            created_at=STAMP,
        )
        assert len(kb) == 2

    def test_exact_duplicate_idempotent(self):
        kb = seeded_kb(BASIC_ENTRIES)
        size = len(kb)
        with pytest.raises(DuplicateEntryError):
            kb.add_entry(
                phenomenon=BASIC_ENTRIES[0][0],
                description=BASIC_ENTRIES[0][1],
                guidance_type="positive",
            )
        assert len(kb) == size


class TestFreeze:
    def test_freeze_blocks_mutation(self):
        kb = seeded_kb(BASIC_ENTRIES)
        kb.freeze()
        with pytest.raises(FrozenKBError):
            kb.add_entry(phenomenon="p", description="y" * 30, guidance_type="positive")
        with pytest.raises(FrozenKBError):
            kb.verify_entry(kb.entries[0].entry_id)

    def test_double_freeze(self):
        kb = seeded_kb(BASIC_ENTRIES)
        kb.freeze()
        with pytest.raises(AlreadyFrozenError):
            kb.freeze()

    def test_version_insertion_order_invariant(self):
        forward = seeded_kb(BASIC_ENTRIES)
        backward = seeded_kb(list(reversed(BASIC_ENTRIES)))
        assert forward.version == backward.version

    def test_version_tracks_content(self):
        kb = seeded_kb(BASIC_ENTRIES, verified=False)
        before = kb.version
        kb.verify_entry(kb.entries[0].entry_id)
        assert kb.version != before


def random_entries(rng: random.Random, count: int):
    words = (
        "flicker texture melt shadow wobble drift blur grain seam ghost "
        "warp shimmer pulsing halo banding stutter smear glint ripple fold"
    ).split()
    entries = []
    for i in range(count):
        phenomenon = " ".join(rng.sample(words, 3)) + f" {i}"
        description = (
            " ".join(rng.choice(words) for _ in range(12)) + f" marker{i}"
        ).capitalize()
        gtype = rng.choice(["positive", "negative"])
        entries.append((phenomenon, description, gtype))
    return entries


class TestRetrieve:
    def test_self_similarity_ranks_first(self):
        kb = seeded_kb(BASIC_ENTRIES)
        target = kb.entries[1]
        result = kb.retrieve(entry_text(target.phenomenon, target.description), "", 2, 2)
        top_entry, top_sim = result.positive_hits[0]
        assert top_entry.entry_id == target.entry_id
        assert top_sim == pytest.approx(1.0, abs=1e-12)

    def test_frozen_empty_kb(self):
        kb = KBIndex()
        kb.freeze()
        result = retrieve(kb, "anything", "at all", 3, 3)
        assert result.positive_hits == () and result.negative_hits == ()

    def test_zero_flag_query(self):
        kb = seeded_kb(BASIC_ENTRIES)
        result = kb.retrieve("", "", 3, 3)
        assert result.positive_hits == () and result.negative_hits == ()

    def test_unverified_hidden_by_default(self):
        kb = seeded_kb(BASIC_ENTRIES, verified=False)
        query = entry_text(*BASIC_ENTRIES[0][:2])
        assert kb.retrieve(query, "", 3, 3).positive_hits == ()
        shown = kb.retrieve(query, "", 3, 3, include_unverified=True)
        assert shown.positive_hits != ()

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_brute_force_oracle(self, k):
        rng = random.Random(99)
        kb = seeded_kb(random_entries(rng, 100))
        query_desc = "shimmer drift over water surface"
        context = "agents disputing texture stability"
        result = kb.retrieve(query_desc, context, k, k)

        # brute force: embed the same query, score every entry, sort, cut
        query_vec = hash_embed(query_desc + "\n" + context)
        expected = {"positive": [], "negative": []}
        for entry in kb.entries:
            sim = float(
                sum(a * b for a, b in zip(query_vec.values, entry.embedding.values))
            )
            expected[entry.guidance_type.value].append((entry.entry_id, sim))
        for hits in expected.values():
            hits.sort(key=lambda pair: (-pair[1], pair[0]))
        got_pos = [(e.entry_id, s) for e, s in result.positive_hits]
        got_neg = [(e.entry_id, s) for e, s in result.negative_hits]
        assert got_pos == [(i, pytest.approx(s)) for i, s in expected["positive"][:k]]
        assert got_neg == [(i, pytest.approx(s)) for i, s in expected["negative"][:k]]

    def test_negative_k_rejected(self):
        kb = KBIndex()
        with pytest.raises(ValueError):
            kb.retrieve("q", "", -1, 0)


class TestReactiveDiagnose:
    FAILURE_RECORD = {
        "entry_id": "vid-9",
        "verdict": {"label": "fake", "confidence": 0.8},
        "traces": [{"trace_id": "t1", "description": "fast pan blur"}],
    }

    def test_candidates_are_reactive_unverified(self):
        reply = (
            '{"candidates": [{"phenomenon": "over-attributing camera motion", '
            '"description": "Fast panning blur was read as synthesis smearing; '
            'handheld footage blurs the same way.", "guidance_type": "negative"}]}'
        )
        provider = CallbackProvider(lambda req: reply)
        candidates = reactive_diagnose(
            (self.FAILURE_RECORD, "real"), provider, created_at=STAMP
        )
        assert len(candidates) == 1
        entry = candidates[0]
        assert entry.provenance is Provenance.REACTIVE
        assert entry.verified is False
        assert entry.guidance_type is GuidanceType.NEGATIVE
        assert "camera motion" in entry.phenomenon

    def test_malformed_twice_yields_empty(self, caplog):
        provider = CallbackProvider(lambda req: "no json here")
        with caplog.at_level("ERROR"):
            candidates = reactive_diagnose((self.FAILURE_RECORD, "real"), provider)
        assert candidates == []
        assert any("diagnosis" in rec.message for rec in caplog.records)

    def test_requires_misclassification(self):
        provider = CallbackProvider(lambda req: "{}")
        with pytest.raises(ValueError, match="misclassified"):
            reactive_diagnose((self.FAILURE_RECORD, "fake"), provider)

    def test_guidance_type_defaults_negative(self):
        reply = (
            '{"candidates": [{"phenomenon": "exposure pumping", '
            '"description": "Auto-exposure oscillation in real cameras mimics temporal flicker."}]}'
        )
        provider = CallbackProvider(lambda req: reply)
        candidates = reactive_diagnose((self.FAILURE_RECORD, "real"), provider)
        assert candidates[0].guidance_type is GuidanceType.NEGATIVE


class TestKBFile:
    def test_save_load_round_trip(self, tmp_path):
        kb = seeded_kb(BASIC_ENTRIES)
        kb.freeze()
        path = tmp_path / "kb.jsonl"
        save_kb(kb, path)
        loaded = load_kb(path)
        assert loaded.frozen
        assert loaded.version == kb.version
        assert [e.to_record() for e in loaded.entries] == [
            e.to_record() for e in kb.entries
        ]
        first_line = path.read_text(encoding="utf-8").splitlines()[0]
        assert '"version"' in first_line and '"embedder_id"' in first_line

    def test_tampered_file_detected(self, tmp_path):
        kb = seeded_kb(BASIC_ENTRIES)
        path = tmp_path / "kb.jsonl"
        save_kb(kb, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        lines[1] = lines[1].replace("temporal flicker", "temporal flick")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(ConsistencyError, match="version mismatch"):
            load_kb(path)

    def test_frozen_run_version_stable(self):
        kb = seeded_kb(BASIC_ENTRIES)
        start = kb.freeze()
        kb.retrieve("temporal flicker", "context", 3, 3)
        assert kb.version == start
