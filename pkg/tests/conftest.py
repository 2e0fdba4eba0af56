import numpy as np
import pytest

from streamtom.core import FrameTokens, KvGroup, StreamConfig


def make_frame(features, saliency=None, index=0):
    features = np.asarray(features, dtype=np.float32)
    if saliency is None:
        saliency = np.linspace(0.0, 1.0, features.shape[0])
    return FrameTokens(frame_index=index, features=features, saliency=np.asarray(saliency, dtype=np.float32))


def small_config(N=10, d=8, G=5, H=2, d_h=4, bits=4, k=4, tau=0.9):
    return StreamConfig(tokens_per_frame=N, feature_dim=d, kv_heads=H, head_dim=d_h, frame_budget=G,
                        retrieval_top_k=k, total_token_budget=max(k * G, 1), quant_bits=bits,
                        similarity_threshold=tau)


def random_kv(rng, H=2, G=4, d_h=3, scale=1.0, index=0):
    return KvGroup(keys=(rng.standard_normal((H, G, d_h)) * scale).astype(np.float32),
                   values=(rng.standard_normal((H, G, d_h)) * scale).astype(np.float32),
                   frame_index=index)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS = []


def record_acceptance(number, name, ok, detail=""):
    ACCEPTANCE_RESULTS.append((number, name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {name}" + (f" ({detail})" if detail else ""))
