import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from fbt.bayes import load_state
from fbt.gateset import gateset_to_dict, ideal_two_qubit_gateset
from fbt.records import ObservationRecord
from fbt.service import SessionError, SessionManager, UnknownSession, make_server, parse_bind, snapshot
from fbt.simulator import NoiseInjection, generate_random_sequences, simulate_sequences

FAST = {"approx_samples": 10}


@pytest.fixture(scope="module")
def records(ideal):
    seqs = generate_random_sequences(ideal.labels, 6, 250, 4)
    inj = NoiseInjection(static={"x1": {"H_IX": 0.01}})
    recs = simulate_sequences(ideal, inj, seqs, 100, 4, window=0.0)
    # five batches of 50 with increasing lab time
    return [ObservationRecord(r.sequence, r.observed_frequency, r.shots, timestamp=float(i), batch_id=i // 50) for i, r in enumerate(recs)]


def payload(**kw):
    return {"bootstrap": {"strategy": "blind_cold", "guessed_cov_scale": 1e-4}, "estimator": FAST, **kw}


def test_snapshot_count_every_n(records):
    m = SessionManager()
    sid = m.create(payload(post_interval=100))
    out = m.submit(sid, records)
    assert len(out) == 250
    sess = m.get(sid)
    assert [s["update_count"] for s in sess.snapshots] == [100, 200]
    assert m.report(sid)["n_snapshots"] == 2
    assert [h["index"] for h in out] == list(range(1, 251))


def test_post_processing_leaves_state_untouched(records, ideal):
    m = SessionManager()
    sid = m.create(payload(post_interval=1))
    m.submit(sid, records[:3])
    st = m.get(sid).estimator.state
    before = st.mean.copy(), st.cov.copy()
    snapshot(ideal, st.mean, st.registry, st.update_count)
    np.testing.assert_array_equal(st.mean, before[0])
    np.testing.assert_array_equal(st.cov, before[1])


def test_empty_batch_and_closed_session(records):
    m = SessionManager()
    sid = m.create(payload())
    assert m.submit(sid, []) == []
    m.close(sid)
    with pytest.raises(SessionError):
        m.submit(sid, records[:1])
    with pytest.raises(UnknownSession):
        m.report("nope")


def test_fresh_report_shows_prior_mean(tmp_path, ideal):
    m = SessionManager(str(tmp_path))
    sid = m.create({"bootstrap": {"strategy": "blind_cold", "depolarization": 0.01}})
    rep = m.report(sid)
    assert rep["status"] == "live" and rep["n_snapshots"] == 0
    path = m.checkpoint(sid)
    st = load_state(path)
    want = snapshot(ideal, st.mean, st.registry, 0)
    got = json.loads(json.dumps(rep["snapshot"]))
    for g in ideal.labels:
        assert got["gates"][g]["noise"] == want["gates"][g]["noise"]
    np.testing.assert_allclose(np.diag(got["gates"]["x1"]["noise"])[1:], 0.99, atol=1e-5)


def test_checkpoint_restart_replay_matches(records, tmp_path):
    m = SessionManager(str(tmp_path))
    a = m.create(payload(id="a"))
    m.submit(a, records)
    b = m.create(payload(id="b"))
    m.submit(b, records[:130])
    m.checkpoint(b, "b.npz")
    restored = SessionManager(str(tmp_path))
    c = restored.restore("b.npz", new_id="c")
    restored.submit(c, records[130:])
    sa, sc = m.get(a), restored.get(c)
    np.testing.assert_array_equal(sc.estimator.state.mean, sa.estimator.state.mean)
    np.testing.assert_array_equal(sc.estimator.state.cov, sa.estimator.state.cov)
    assert [s["update_count"] for s in sc.snapshots] == [s["update_count"] for s in sa.snapshots]
    strip = lambda ser: [(e["batch"], e["lab_time"], e["eps_ent"]) for e in ser]
    assert strip(sc.batch_series) == strip(sa.batch_series)


def test_infidelity_series_has_one_entry_per_batch(records):
    m = SessionManager()
    sid = m.create(payload())
    for k in range(0, 250, 37):  # chunk boundaries deliberately misaligned with batches
        m.submit(sid, records[k : k + 37])
    series = m.report(sid)["infidelity_series"]
    assert [e["batch"] for e in series] == [0, 1, 2, 3, 4]
    assert [e["final"] for e in series] == [True] * 4 + [False]
    assert series[1]["lab_time"] == pytest.approx(74.5)


def test_residuals_are_zero_mean(records):
    m = SessionManager()
    sid = m.create(payload())
    out = m.submit(sid, records)
    r = np.array([h["observed"] - h["predicted"] for h in out[50:]])
    assert abs(r.mean()) < 3 * r.std(ddof=1) / np.sqrt(r.size)


def test_concurrent_submitters_get_gap_free_indices(records):
    m = SessionManager()
    sid = m.create(payload())
    chunks = [records[i : i + 10] for i in range(0, 60, 10)]
    got = []
    lock = threading.Lock()

    def worker(ch):
        out = m.submit(sid, ch)
        with lock:
            got.extend(h["index"] for h in out)

    threads = [threading.Thread(target=worker, args=(c,)) for c in chunks]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(got) == list(range(1, 61))
    assert len(m.get(sid).estimator.history) == m.get(sid).update_count == 60


def test_invalid_payloads_name_the_field():
    m = SessionManager()
    gs = gateset_to_dict(ideal_two_qubit_gateset())
    gs["gates"]["x1"]["ideal"] = [[1.0, 0.0]]
    with pytest.raises(ValueError, match="gates.x1.ideal"):
        m.create({"gateset": gs})
    with pytest.raises(ValueError, match="checkpoint"):
        m.create({"bootstrap": {"strategy": "full_warm"}})
    with pytest.raises(ValueError):
        m.create({"bootstrap": {"strategy": "blind_cold"}, "post_interval": 0})
    m.create({"id": "dup"})
    with pytest.raises(ValueError, match="exists"):
        m.create({"id": "dup"})


def test_full_warm_session_is_live_immediately(records, tmp_path):
    m = SessionManager(str(tmp_path))
    sid = m.create(payload())
    m.submit(sid, records[:20])
    m.checkpoint(sid, "warm.npz")
    warm = m.create({"bootstrap": {"strategy": "full_warm", "checkpoint": "warm.npz"}})
    s = m.get(warm)
    assert s.status == "live" and s.estimator.state.provenance == "full_warm"
    np.testing.assert_array_equal(s.estimator.state.mean, m.get(sid).estimator.state.mean)


def test_sampling_boot_runs_in_background():
    m = SessionManager()
    sid = m.create({"bootstrap": {"strategy": "fidelity_cold", "fidelity_stats": {"x1": [0.99, 1e-6]}, "n_samples": 50}})
    s = m.get(sid)
    s.boot_thread.join(timeout=120)
    assert s.status == "live" and s.estimator.state.provenance == "fidelity_cold"


def _call(url, method="GET", body=None):
    data = body.encode() if isinstance(body, str) else None
    req = urllib.request.Request(url, data=data, method=method)
    try:
        with urllib.request.urlopen(req, timeout=60) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_http_endpoints(records, tmp_path):
    server = make_server("127.0.0.1:0", str(tmp_path))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        code, body = _call(base + "/sessions", "POST", json.dumps(payload(post_interval=5)))
        assert code == 201 and body["status"] == "live"
        sid = body["id"]
        lines = "\n".join(json.dumps(r.to_dict()) for r in records[:12])
        code, body = _call(f"{base}/sessions/{sid}/records", "POST", lines)
        assert code == 200 and len(body["summaries"]) == 12
        code, rep = _call(f"{base}/sessions/{sid}/report")
        assert code == 200 and rep["n_snapshots"] == 2 and rep["ingestion"]["update_count"] == 12
        code, body = _call(f"{base}/sessions/{sid}/checkpoint", "POST", "")
        assert code == 200 and body["path"].endswith(".npz")
        assert _call(f"{base}/sessions/missing/report")[0] == 404
        assert _call(f"{base}/sessions/{sid}/records", "POST", "{not json")[0] == 400
        assert _call(f"{base}/nowhere")[0] == 404
        assert _call(f"{base}/sessions/{sid}", "DELETE")[0] == 200
        code, body = _call(f"{base}/sessions/{sid}/records", "POST", lines)
        assert code == 409
    finally:
        server.shutdown()
        server.server_close()


def test_bind_from_environment(monkeypatch):
    monkeypatch.setenv("FBT_BIND", "0.0.0.0:9001")
    assert parse_bind() == ("0.0.0.0", 9001)
    assert parse_bind(":7000") == ("127.0.0.1", 7000)
