import numpy as np
import pytest

from streamtom.core import StreamConfig
from streamtom.errors import EmptyStore
from streamtom.harness import SyntheticStreamSpec, generate_stream
from streamtom.pipeline import KvProjector, PipelineState, answer_query, ingest_frame, ingest_stream

from conftest import make_frame, random_kv


def _cfg(**kw):
    base = dict(tokens_per_frame=32, feature_dim=8, kv_heads=2, head_dim=4, frame_budget=6,
                retrieval_top_k=5, total_token_budget=30)
    base.update(kw)
    return StreamConfig(**base)


def _spec(**kw):
    base = dict(seed=11, tokens_per_frame=32, feature_dim=8, frames=64, static_fraction=0.5)
    base.update(kw)
    return SyntheticStreamSpec(**base)


def test_projector_deterministic():
    a = KvProjector.from_seed(5, 8, 2, 4)
    b = KvProjector.from_seed(5, 8, 2, 4)
    c = KvProjector.from_seed(6, 8, 2, 4)
    np.testing.assert_array_equal(a.key_weight, b.key_weight)
    assert not np.array_equal(a.key_weight, c.key_weight)
    assert not np.array_equal(a.key_weight, a.value_weight)


def test_projector_rejects_raw_frames(rng):
    proj = KvProjector.from_seed(0, 8, 2, 4)
    with pytest.raises(TypeError):
        proj.project(make_frame(rng.standard_normal((6, 8))))


def test_sixty_four_frames_sixty_four_groups():
    cfg = _cfg()
    state = PipelineState(cfg)
    reports = ingest_stream(state, generate_stream(_spec()), KvProjector.for_config(cfg))
    assert len(state.store) == 64 == state.frame_counter
    assert all(g.num_tokens == cfg.frame_budget for g in state.store.groups)
    assert all(r.k_s + r.k_d == cfg.frame_budget for r in reports)


def test_constant_stream_reports_no_dynamic():
    cfg = _cfg()
    state = PipelineState(cfg)
    spec = _spec(drift_amplitude=0.0, dynamic_resample_rate=0.0, frames=8)
    reports = ingest_stream(state, generate_stream(spec), KvProjector.for_config(cfg))
    assert reports[0].k_d == cfg.frame_budget
    assert all(r.k_d == 0 and r.static_count == 32 for r in reports[1:])


def test_replay_bytewise_identical():
    cfg = _cfg()
    snaps = []
    for _ in range(2):
        state = PipelineState(cfg)
        ingest_stream(state, generate_stream(_spec()), KvProjector.for_config(cfg, seed=3))
        snaps.append(state.store.to_bytes())
    assert snaps[0] == snaps[1]


@pytest.mark.parametrize("batch", [8, 32])
def test_batch_size_does_not_change_bytes(batch):
    cfg = _cfg()
    ref = PipelineState(cfg)
    ingest_stream(ref, generate_stream(_spec()), KvProjector.for_config(cfg), batch_size=1)
    other = PipelineState(cfg)
    ingest_stream(other, generate_stream(_spec()), KvProjector.for_config(cfg), batch_size=batch)
    assert other.store.to_bytes() == ref.store.to_bytes()


def test_bytes_appended_report():
    cfg = _cfg()
    state = PipelineState(cfg)
    frame = next(iter(generate_stream(_spec())))
    rep = ingest_frame(state, frame, KvProjector.for_config(cfg))
    assert rep.bytes_appended == state.store.ledger_bytes == state.store.group_bytes


class TestAnswerQuery:
    def _state(self, frames, k=5):
        cfg = _cfg(retrieval_top_k=k)
        state = PipelineState.start(cfg, random_kv(np.random.default_rng(0), 2, 3, 4))
        ingest_stream(state, generate_stream(_spec(frames=frames)), KvProjector.for_config(cfg))
        return state

    def test_fewer_frames_than_k(self, rng):
        state = self._state(3)
        active, report = answer_query(state, rng.standard_normal(8))
        assert report.selected and sorted(report.selected) == [0, 1, 2]
        assert report.active_tokens == 3 * 6
        assert active.prefix_tokens == 3

    def test_bounded(self, rng):
        state = self._state(40)
        _, report = answer_query(state, rng.standard_normal(8))
        assert len(report.selected) == 5 and report.active_tokens == 30
        assert report.dequantized_bytes == 5 * 2 * (2 * 6 * 4 * 4)

    def test_group_seven_retrieved(self):
        state = self._state(40)
        _, report = answer_query(state, state.store.groups[7].rep_key)
        assert 7 in report.selected and report.selected[0] == 7

    def test_empty(self, rng):
        with pytest.raises(EmptyStore):
            answer_query(PipelineState(_cfg()), rng.standard_normal(8))

    def test_default_scale_budget(self, rng):
        # default widths, smaller frames: 512 stored groups, 240 retrieved, 12k tokens
        cfg = StreamConfig(tokens_per_frame=64, feature_dim=16, kv_heads=4, head_dim=128, frame_budget=50)
        state = PipelineState(cfg)
        ingest_stream(state, generate_stream(SyntheticStreamSpec(seed=1, tokens_per_frame=64, feature_dim=16,
                                                                 frames=512)),
                      KvProjector.for_config(cfg))
        _, report = answer_query(state, rng.standard_normal(512))
        assert len(report.selected) == 240
        assert report.active_tokens == 12_000
