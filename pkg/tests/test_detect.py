"""Detectors: downloaded-binary execution and SSH stepping stones."""

import hashlib
import json

from flowlink.correlate import AttributionResult, Candidate
from flowlink.detect import (
    ATTACHMENT_EXECUTED,
    STEPPING_STONE,
    Alert,
    AttachmentDetector,
    DownloadStore,
    SteppingStoneDetector,
)
from flowlink.flowlog import DownloadEvent, FlowRecord
from flowlink.model import FileHashRecord, FlowTuple, Proto, SnapshotBatch, TableKind
from flowlink.runtime import EventLoop

from conftest import make_proc


def tup(orig_p=40000, resp_h="203.0.113.80", resp_p=443):
    return FlowTuple("10.1.0.1", orig_p, resp_h, resp_p, Proto.TCP)


def download(ts=100.0, sha="a" * 64, uid="D1"):
    return DownloadEvent(ts=ts, sha256=sha, flow=tup(), flow_uid=uid)


class QueryStub:
    """Captures one-time queries the detectors publish."""

    def __init__(self):
        self.published = []          # (interest_id, query, host)
        self.retracted = []
        self._n = 0

    def publish(self, query, host):
        self._n += 1
        iid = f"q{self._n}"
        self.published.append((iid, query, host))
        return iid

    def retract(self, iid):
        self.retracted.append(iid)


def attachment_harness(timeout=5.0, retention=86400.0):
    loop = EventLoop()
    stub = QueryStub()
    alerts = []
    det = AttachmentDetector(DownloadStore(retention=retention), stub.publish,
                             stub.retract, alerts.append, loop,
                             query_timeout=timeout)
    return loop, stub, alerts, det


def hash_batch(host, path, sha, batch_id=1):
    return SnapshotBatch(host=host, table=TableKind.FILE_HASH,
                         batch_id=batch_id,
                         rows=(FileHashRecord(host, path, sha),))


# --- alerts ------------------------------------------------------------------------


def test_alert_identity_is_kind_plus_evidence_digest():
    a = Alert(ATTACHMENT_EXECUTED, 5.0, "h1", "x", {"pid": 9, "host": "h1"})
    b = Alert(ATTACHMENT_EXECUTED, 99.0, "h1", "different text",
              {"host": "h1", "pid": 9})
    assert a.identity == b.identity  # ts/summary don't matter, key order doesn't
    digest = hashlib.sha256(
        json.dumps({"host": "h1", "pid": 9}, sort_keys=True).encode()).hexdigest()
    assert a.identity == (ATTACHMENT_EXECUTED, digest)
    c = Alert(ATTACHMENT_EXECUTED, 5.0, "h1", "x", {"pid": 10, "host": "h1"})
    assert a.identity != c.identity
    d = Alert(STEPPING_STONE, 5.0, "h1", "x", {"pid": 9, "host": "h1"})
    assert a.identity != d.identity


def test_alert_dict_roundtrip():
    a = Alert(STEPPING_STONE, 3.5, "h2", "s", {"in_pid": 1, "out_pid": 2})
    assert Alert.from_dict(a.to_dict()) == a


# --- download store ------------------------------------------------------------------


def test_download_store_prunes_by_retention():
    store = DownloadStore(retention=100.0)
    store.add(download(ts=10.0, uid="old"))
    store.add(download(ts=60.0, uid="new"))
    assert len(store) == 2
    assert store.prune(now=120.0) == 1
    assert [d.flow_uid for d in store.by_hash("a" * 64)] == ["new"]
    assert store.prune(now=200.0) == 1
    assert len(store) == 0
    assert store.by_hash("a" * 64) == []


def test_download_store_duplicate_hash_newest_first():
    store = DownloadStore()
    store.add(download(ts=10.0, uid="first"))
    store.add(download(ts=30.0, uid="second"))
    store.add(download(ts=20.0, sha="b" * 64, uid="other"))
    assert [d.flow_uid for d in store.by_hash("a" * 64)] == ["second", "first"]
    assert [d.flow_uid for d in store.by_hash("b" * 64)] == ["other"]


# --- attachment detector ---------------------------------------------------------------


def test_no_downloads_means_no_query():
    loop, stub, alerts, det = attachment_harness()
    det.on_process_added(make_proc(pid=900, binary="/tmp/x"), now=5.0)
    assert stub.published == [] and alerts == []


def test_exec_of_downloaded_binary_alerts():
    loop, stub, alerts, det = attachment_harness()
    sha = "a" * 64
    det.on_download(download(ts=100.0, sha=sha))
    proc = make_proc(host="h1", pid=9000, binary="/home/alice/mal.bin")
    det.on_process_added(proc, now=103.0)
    assert stub.published == [
        ("q1", "file_hash WHERE path == '/home/alice/mal.bin'", "h1")]
    det.on_file_hash(hash_batch("h1", "/home/alice/mal.bin", sha), now=103.1)
    assert len(alerts) == 1
    ev = alerts[0].evidence
    assert alerts[0].kind == ATTACHMENT_EXECUTED
    assert (ev["host"], ev["pid"], ev["sha256"]) == ("h1", 9000, sha)
    assert ev["flow_uid"] == "D1" and ev["download_ts"] == 100.0
    assert stub.retracted == ["q1"]  # answered queries are withdrawn


def test_hash_mismatch_means_no_alert():
    loop, stub, alerts, det = attachment_harness()
    det.on_download(download(sha="a" * 64))
    det.on_process_added(make_proc(pid=9000, binary="/bin/clean"), now=101.0)
    det.on_file_hash(hash_batch("h1", "/bin/clean", "c" * 64), now=101.1)
    assert alerts == []
    assert stub.retracted == ["q1"]


def test_cached_hash_skips_second_query():
    loop, stub, alerts, det = attachment_harness()
    sha = "a" * 64
    det.on_download(download(sha=sha))
    det.on_process_added(make_proc(pid=9000, binary="/tmp/x"), now=101.0)
    det.on_file_hash(hash_batch("h1", "/tmp/x", sha), now=101.1)
    det.on_process_added(make_proc(pid=9001, binary="/tmp/x"), now=102.0)
    assert len(stub.published) == 1
    assert [a.evidence["pid"] for a in alerts] == [9000, 9001]


def test_identical_evidence_is_emitted_once():
    loop, stub, alerts, det = attachment_harness()
    sha = "a" * 64
    det.on_download(download(sha=sha))
    proc = make_proc(pid=9000, binary="/tmp/x")
    det.on_process_added(proc, now=101.0)
    det.on_file_hash(hash_batch("h1", "/tmp/x", sha), now=101.1)
    det.on_process_added(proc, now=102.0)  # replayed exec, cached hash path
    assert len(alerts) == 1
    assert det.counters["alerts_duplicate"] == 1


def test_concurrent_execs_share_one_query():
    loop, stub, alerts, det = attachment_harness()
    sha = "a" * 64
    det.on_download(download(sha=sha))
    det.on_process_added(make_proc(pid=9000, binary="/tmp/x"), now=101.0)
    det.on_process_added(make_proc(pid=9001, binary="/tmp/x"), now=101.5)
    assert len(stub.published) == 1
    det.on_file_hash(hash_batch("h1", "/tmp/x", sha), now=102.0)
    assert [a.evidence["pid"] for a in alerts] == [9000, 9001]


def test_unanswered_query_times_out_and_retracts():
    loop, stub, alerts, det = attachment_harness(timeout=5.0)
    det.on_download(download())
    loop.run_until(100.0)
    det.on_process_added(make_proc(pid=9000, binary="/tmp/x"), now=100.0)
    loop.run_until(104.0)
    assert det.counters["hash_query_timeouts"] == 0
    loop.run_until(106.0)
    assert det.counters["hash_query_timeouts"] == 1
    assert stub.retracted == ["q1"]
    det.on_file_hash(hash_batch("h1", "/tmp/x", "a" * 64), now=107.0)
    assert alerts == []  # the waiting exec was dropped with the query


def test_expired_download_never_matches():
    loop, stub, alerts, det = attachment_harness(retention=100.0)
    det.on_download(download(ts=10.0))
    det.on_process_added(make_proc(pid=9000, binary="/tmp/x"), now=200.0)
    assert stub.published == [] and alerts == []


# --- stepping-stone detector ---------------------------------------------------------


def ssh_result(orig=None, resp=None, uid="F1", end=100.0, resp_h="10.1.0.2",
               orig_h="10.1.0.1", orig_p=41000):
    originator = (Candidate(*orig),) if orig else ()
    responder = (Candidate(*resp),) if resp else ()
    flow = FlowTuple(orig_h, orig_p, resp_h, 22, Proto.TCP)
    record = FlowRecord(ts=end - 10.0, uid=uid, orig_h=orig_h, orig_p=orig_p,
                        resp_h=resp_h, resp_p=22, proto=Proto.TCP,
                        duration=10.0)
    return AttributionResult(flow=flow, flow_start=end - 10.0, flow_end=end,
                             originator=originator, responder=responder,
                             decided_at=end, tag=record)


def stepping_harness(window=600.0, timeout=5.0):
    loop = EventLoop()
    stub = QueryStub()
    alerts = []
    det = SteppingStoneDetector(stub.publish, stub.retract, alerts.append,
                                loop, pairing_window=window,
                                query_timeout=timeout)
    return loop, stub, alerts, det


def desc_batch(host, root, pids):
    rows = tuple({"root": root, "pid": p} for p in pids) or ({"root": root},)
    return SnapshotBatch(host=host, table=TableKind.PROCESS_DESCENDANTS,
                         batch_id=1, rows=rows)


def test_relay_pair_alerts_when_client_descends_from_session():
    loop, stub, alerts, det = stepping_harness()
    # outbound leg reports first (it ends first), inbound session later
    det.on_attributed(ssh_result(orig=("h001", 205), uid="OUT", end=120.0,
                                 orig_h="10.1.0.2", resp_h="10.1.0.3"), now=120.0)
    assert stub.published == []  # half a pair: nothing to ask yet
    det.on_attributed(ssh_result(resp=("h001", 201), uid="IN", end=125.0,
                                 orig_h="10.1.0.1", resp_h="10.1.0.2"), now=125.0)
    assert stub.published == [
        ("q1", "process_descendants WHERE pid == 201", "h001")]
    det.on_descendants(desc_batch("h001", 201, [203, 205]), now=125.2)
    assert len(alerts) == 1
    ev = alerts[0].evidence
    assert alerts[0].kind == STEPPING_STONE
    assert (ev["in_pid"], ev["out_pid"]) == (201, 205)
    assert (ev["in_flow"], ev["out_flow"]) == ("IN", "OUT")
    assert stub.retracted == ["q1"]


def test_unrelated_outbound_ssh_stays_quiet():
    loop, stub, alerts, det = stepping_harness()
    det.on_attributed(ssh_result(orig=("h001", 205), uid="OUT", end=120.0),
                      now=120.0)
    det.on_attributed(ssh_result(resp=("h001", 201), uid="IN", end=125.0),
                      now=125.0)
    det.on_descendants(desc_batch("h001", 201, [203]), now=125.2)
    assert alerts == []
    assert det.counters["descendant_queries"] == 1


def test_empty_descendant_answer_resolves_without_alert():
    loop, stub, alerts, det = stepping_harness()
    det.on_attributed(ssh_result(orig=("h001", 205), uid="OUT", end=120.0),
                      now=120.0)
    det.on_attributed(ssh_result(resp=("h001", 201), uid="IN", end=125.0),
                      now=125.0)
    det.on_descendants(desc_batch("h001", 201, []), now=125.2)
    assert alerts == []
    assert stub.retracted == ["q1"]


def test_legs_on_different_hosts_never_pair():
    loop, stub, alerts, det = stepping_harness()
    det.on_attributed(ssh_result(orig=("h002", 205), uid="OUT", end=120.0),
                      now=120.0)
    det.on_attributed(ssh_result(resp=("h001", 201), uid="IN", end=125.0),
                      now=125.0)
    assert stub.published == [] and alerts == []


def test_pairing_window_excludes_stale_legs():
    loop, stub, alerts, det = stepping_harness(window=600.0)
    det.on_attributed(ssh_result(orig=("h001", 205), uid="OUT", end=100.0),
                      now=100.0)
    det.on_attributed(ssh_result(resp=("h001", 201), uid="IN", end=800.0),
                      now=800.0)
    assert stub.published == []


def test_same_flow_cannot_pair_with_itself():
    loop, stub, alerts, det = stepping_harness()
    det.on_attributed(ssh_result(orig=("h001", 205), resp=("h001", 201),
                                 uid="LOOP", end=100.0), now=100.0)
    assert stub.published == []


def test_non_ssh_flows_are_ignored():
    loop, stub, alerts, det = stepping_harness()
    res = ssh_result(orig=("h001", 205), uid="WEB", end=100.0)
    res = AttributionResult(
        flow=FlowTuple("10.1.0.1", 41000, "10.1.0.2", 443, Proto.TCP),
        flow_start=90.0, flow_end=100.0, originator=res.originator,
        tag=res.tag)
    det.on_attributed(res, now=100.0)
    assert det.counters["ssh_flows"] == 0 and stub.published == []


def test_timeout_makes_pair_retriable():
    loop, stub, alerts, det = stepping_harness(timeout=5.0)
    loop.run_until(100.0)
    det.on_attributed(ssh_result(orig=("h001", 205), uid="OUT", end=100.0),
                      now=100.0)
    det.on_attributed(ssh_result(resp=("h001", 201), uid="IN", end=100.5),
                      now=100.5)
    assert len(stub.published) == 1
    loop.run_until(110.0)
    assert det.counters["descendant_timeouts"] == 1
    assert stub.retracted == ["q1"]
    # a replayed inbound report retries the tree query
    det.on_attributed(ssh_result(resp=("h001", 201), uid="IN", end=100.5),
                      now=110.0)
    assert len(stub.published) == 2
    det.on_descendants(desc_batch("h001", 201, [205]), now=110.2)
    assert len(alerts) == 1


def test_duplicate_pair_not_requeried():
    loop, stub, alerts, det = stepping_harness()
    out = ssh_result(orig=("h001", 205), uid="OUT", end=100.0)
    inc = ssh_result(resp=("h001", 201), uid="IN", end=101.0)
    det.on_attributed(out, now=100.0)
    det.on_attributed(inc, now=101.0)
    det.on_descendants(desc_batch("h001", 201, [205]), now=101.2)
    det.on_attributed(inc, now=102.0)  # replay after a successful answer
    assert len(stub.published) == 1
    assert len(alerts) == 1
