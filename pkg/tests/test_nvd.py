import gzip
import json

import pytest

from cyberposg.env import AD, RDP, VPN
from cyberposg.model import N_VERSIONS
from cyberposg.nvd import NvdError, ingest_nvd, load_feed, map_apps, parse_record


def _v2(cid, score, cpes):
    return {"cve": {"id": cid, "metrics": {"cvssMetricV31": [{"cvssData": {"baseScore": score}}]},
                    "configurations": [{"nodes": [{"cpeMatch": [{"criteria": c} for c in cpes]}]}]}}


def _v11(cid, score, cpes):
    return {"cve": {"CVE_data_meta": {"ID": cid}},
            "impact": {"baseMetricV3": {"cvssV3": {"baseScore": score}}},
            "configurations": {"nodes": [{"cpe_match": [], "children": [
                {"cpe_match": [{"cpe23Uri": c} for c in cpes]}]}]}}


RECORDS = [
    ("CVE-2024-0001", 9.8, ["cpe:2.3:a:cisco:anyconnect_secure_mobility_client:4.9:*"]),
    ("CVE-2024-0002", 7.5, ["cpe:2.3:o:microsoft:remote_desktop:10:*"]),
    ("CVE-2024-0003", 5.0, ["cpe:2.3:a:microsoft:active_directory:2019:*"]),
]


@pytest.fixture(params=["2.0", "1.1"])
def feed(request, tmp_path):
    if request.param == "2.0":
        data = {"vulnerabilities": [_v2(*r) for r in RECORDS]}
    else:
        data = {"CVE_Items": [_v11(*r) for r in RECORDS]}
    path = tmp_path / "feed.json"
    path.write_text(json.dumps(data))
    return path


def test_all_records_parse_in_both_layouts(feed):
    rep = ingest_nvd(feed, 3)
    assert (rep.parsed, rep.malformed, rep.unmapped) == (3, 0, 0)
    by_id = {e.name: e for e in rep.exploits}
    assert set(by_id) == {r[0] for r in RECORDS}
    for cid, score, _ in RECORDS:
        assert by_id[cid].success_prob == pytest.approx(score / 10)
    assert by_id["CVE-2024-0001"].req.apps_any == ((VPN, 0, N_VERSIONS - 2),)


def test_sample_zero_gives_no_exploits(feed):
    assert ingest_nvd(feed, 0).exploits == []


def test_sampling_is_seeded(feed):
    picks = [tuple(e.name for e in ingest_nvd(feed, 2, seed=s).exploits) for s in range(6)]
    assert picks == [tuple(e.name for e in ingest_nvd(feed, 2, seed=s).exploits) for s in range(6)]
    assert len(set(picks)) > 1
    assert all(len(p) == 2 for p in picks)
    assert [e.slot for e in ingest_nvd(feed, 2, seed=0, first_slot=1).exploits] == [1, 2]


def test_malformed_and_unmapped_records_counted(tmp_path):
    items = [_v2(*RECORDS[0]), {"cve": {"id": "CVE-X"}}, {"nonsense": 1},
             _v2("CVE-2024-0009", 4.0, ["cpe:2.3:a:acme:toaster:1:*"])]
    path = tmp_path / "feed.json.gz"
    with gzip.open(path, "wt") as fh:
        json.dump({"vulnerabilities": items}, fh)
    rep = ingest_nvd(path, 5)
    assert (rep.parsed, rep.malformed, rep.unmapped) == (1, 2, 1)
    assert [e.name for e in rep.exploits] == ["CVE-2024-0001"]


def test_empty_feed_rejected(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"vulnerabilities": []}))
    with pytest.raises(NvdError):
        ingest_nvd(path, 1)
    path.write_text(json.dumps({"something": []}))
    with pytest.raises(NvdError):
        load_feed(path)
    with pytest.raises(NvdError):
        ingest_nvd(path.with_name("x.json"), -1)


def test_score_bounds_and_keyword_mapping():
    with pytest.raises(NvdError):
        parse_record(_v2("CVE-1", 11.0, []))
    assert map_apps(["cpe:2.3:o:microsoft:Remote_Desktop:*", "kerberos"]) == tuple(sorted((RDP, AD)))
    assert map_apps(["cpe:2.3:a:acme:toaster"]) == ()
