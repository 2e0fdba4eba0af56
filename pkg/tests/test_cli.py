import hashlib

import numpy as np
import pytest

from streamtom.cli import main, worker_count
from streamtom.oqm import MemoryStore


def run(argv, capsys):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def stream(tmp_path, capsys):
    path = tmp_path / "s.toks"
    code, _, _ = run(["generate", "--seed", 7, "--frames", 64, "--n", 196, "--dim", 64, "-o", path], capsys)
    assert code == 0
    return path


class TestGenerate:
    def test_deterministic(self, tmp_path, capsys, stream):
        other = tmp_path / "t.toks"
        code, out, _ = run(["generate", "--seed", 7, "--frames", 64, "--n", 196, "--dim", 64, "-o", other], capsys)
        assert code == 0 and str(other.stat().st_size) in out
        assert sha(other) == sha(stream)

    def test_zero_frames(self, tmp_path, capsys):
        path = tmp_path / "z.toks"
        assert run(["generate", "--frames", 0, "-o", path], capsys)[0] == 0
        assert path.stat().st_size == 32

    def test_bad_static_fraction(self, tmp_path, capsys):
        code, _, err = run(["generate", "--static-fraction", 1.5, "-o", tmp_path / "x"], capsys)
        assert code == 2 and "static_fraction" in err

    def test_bad_flag(self, capsys):
        assert run(["generate", "--frames", -3], capsys)[0] == 2

    def test_unwritable(self, tmp_path, capsys):
        assert run(["generate", "-o", tmp_path / "no" / "dir" / "s.toks"], capsys)[0] == 3


class TestRun:
    def test_default_ratio(self, tmp_path, capsys, stream):
        snap = tmp_path / "m.oqm"
        code, out, _ = run(["run", stream, "--snapshot", snap], capsys)
        assert code == 0
        assert "compression ratio: 15.7x" in out
        assert "retention: 6.4%" in out
        assert "frames: 64" in out
        assert len(MemoryStore.from_bytes(snap.read_bytes())) == 64

    def test_two_bit(self, tmp_path, capsys, stream):
        code, out, _ = run(["run", stream, "--tokens", 50, "--bits", 2, "--snapshot", tmp_path / "m"], capsys)
        assert code == 0
        assert "compression ratio: 31.4x" in out
        assert "retention: 3.2%" in out

    def test_missing_file(self, tmp_path, capsys):
        assert run(["run", tmp_path / "missing.toks"], capsys)[0] == 3

    def test_malformed_stream(self, tmp_path, capsys):
        bad = tmp_path / "bad.toks"
        bad.write_bytes(b"nonsense" * 8)
        assert run(["run", bad, "--snapshot", tmp_path / "m"], capsys)[0] == 4

    def test_invalid_frame_names_index(self, tmp_path, capsys):
        from streamtom.core import FrameTokens
        from streamtom.streamfile import write_stream
        frames = [FrameTokens(t, np.ones((6, 3), np.float32), np.full(6, 0.5, np.float32)) for t in range(3)]
        frames.append(FrameTokens(3, np.ones((6, 3), np.float32), np.full(6, 2.0, np.float32)))
        path = tmp_path / "v.toks"
        write_stream(path, frames, 6, 3)
        code, _, err = run(["run", path, "--tokens", 2, "--snapshot", tmp_path / "m"], capsys)
        assert code == 4 and "frame 3" in err

    def test_stream_without_saliency(self, tmp_path, capsys):
        path = tmp_path / "ns.toks"
        run(["generate", "--frames", 5, "--n", 20, "--dim", 8, "--saliency", "none", "-o", path], capsys)
        code, out, _ = run(["run", path, "--tokens", 5, "--snapshot", tmp_path / "m"], capsys)
        assert code == 0 and "frames: 5" in out

    def test_outputs_deterministic(self, tmp_path, capsys, stream, monkeypatch):
        digests = []
        for i, batch in enumerate((1, 8, 32)):
            snap, csv = tmp_path / f"m{i}.oqm", tmp_path / f"m{i}.csv"
            code, out, _ = run(["run", stream, "--snapshot", snap, "--metrics", csv, "--queries", 4,
                                "--batch-size", batch], capsys)
            assert code == 0
            digests.append((sha(snap), sha(csv)))
        assert len(set(digests)) == 1

    def test_thread_env(self, tmp_path, capsys, stream, monkeypatch):
        monkeypatch.setenv("STREAMTOM_THREADS", "2")
        assert worker_count() == 2
        code, _, _ = run(["run", stream, "--snapshot", tmp_path / "a", "--metrics", tmp_path / "a.csv",
                          "--queries", 3], capsys)
        assert code == 0
        monkeypatch.setenv("STREAMTOM_THREADS", "0")
        assert worker_count() >= 1
        monkeypatch.setenv("STREAMTOM_THREADS", "-1")
        assert run(["run", stream, "--snapshot", tmp_path / "b", "--queries", 3], capsys)[0] == 2


class TestQuery:
    @pytest.fixture
    def snapshot(self, tmp_path, capsys, stream):
        snap = tmp_path / "m.oqm"
        assert run(["run", stream, "--snapshot", snap], capsys)[0] == 0
        return snap

    def test_k_at_least_T(self, snapshot, capsys):
        code, out, _ = run(["query", snapshot, "--group-key", 0, "--k", 100], capsys)
        assert code == 0 and "active tokens: 3200" in out

    def test_own_rep_key_first(self, snapshot, capsys, tmp_path):
        store = MemoryStore.from_bytes(snapshot.read_bytes())
        qfile = tmp_path / "q.f32"
        qfile.write_bytes(store.groups[11].rep_key.astype("<f4").tobytes())
        code, out, _ = run(["query", snapshot, "--query-file", qfile, "--k", 5], capsys)
        assert code == 0
        ranked = next(line for line in out.splitlines() if line.startswith("selected")).split(":")[1].split()
        assert ranked[0] == "11" and len(ranked) == 5
        assert "active tokens: 250" in out

    def test_malformed_snapshot(self, tmp_path, capsys):
        bad = tmp_path / "bad.oqm"
        bad.write_bytes(b"OQM1" + b"\x00" * 10)
        code, _, err = run(["query", bad, "--group-key", 0], capsys)
        assert code == 4 and "header" in err

    def test_missing_snapshot(self, tmp_path, capsys):
        assert run(["query", tmp_path / "none.oqm", "--group-key", 0], capsys)[0] == 3

    def test_wrong_query_length(self, snapshot, tmp_path, capsys):
        q = tmp_path / "q.f32"
        q.write_bytes(b"\x00" * 12)
        assert run(["query", snapshot, "--query-file", q], capsys)[0] == 4


class TestModelMemory:
    def test_defaults(self, capsys):
        code, out, _ = run(["model-memory"], capsys)
        assert code == 0
        assert "20230963200 B = 18.8 GiB" in out
        assert "= 1.2 GiB" in out
        assert "compression ratio: 15.68x" in out
        assert "growth rate: 5619712 B/s" in out

    @pytest.mark.parametrize("tokens, bits, pct", [(40, 4, "5.1"), (60, 2, "3.8"), (40, 2, "2.6"), (60, 4, "7.7")])
    def test_table_rows(self, capsys, tokens, bits, pct):
        code, out, _ = run(["model-memory", "--tokens", tokens, "--bits", bits], capsys)
        assert code == 0 and f"retention: {pct}%" in out

    @pytest.mark.parametrize("flag", ["--layers", "--n", "--heads", "--bits", "--fps", "--seconds"])
    def test_nonpositive(self, capsys, flag):
        assert run(["model-memory", flag, 0], capsys)[0] == 2
