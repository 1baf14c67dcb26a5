"""Offline NVD feed ingestion: CVE records to exploit templates.

Both the JSON 2.0 API dump layout (``vulnerabilities[].cve``) and the legacy
1.1 feed layout (``CVE_Items[]``) are accepted. Only the CVE id, the CVSS
base score and the affected-product strings are read.
"""

from __future__ import annotations

import gzip
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import AD, FORTIOS, PASSWORD_MGMT, RDP, VPN, ExploitSpec
from .model import N_VERSIONS, ConfigReq

log = logging.getLogger(__name__)

# substring of a lower-cased product string -> scenario app slot
KEYWORDS: dict[str, int] = {
    "vpn": VPN,
    "anyconnect": VPN,
    "globalprotect": VPN,
    "pulse_connect_secure": VPN,
    "remote_desktop": RDP,
    "rdp": RDP,
    "terminal_services": RDP,
    "active_directory": AD,
    "domain_controller": AD,
    "kerberos": AD,
    "password": PASSWORD_MGMT,
    "lastpass": PASSWORD_MGMT,
    "keepass": PASSWORD_MGMT,
    "1password": PASSWORD_MGMT,
    "fortios": FORTIOS,
    "fortigate": FORTIOS,
}


class NvdError(ValueError):
    pass


@dataclass(frozen=True)
class CveRecord:
    cve_id: str
    score: float
    products: tuple[str, ...]


@dataclass
class IngestReport:
    exploits: list[ExploitSpec]
    parsed: int
    malformed: int
    unmapped: int


def _score_v2(metrics: dict) -> float | None:
    for key in ("cvssMetricV40", "cvssMetricV31", "cvssMetricV30", "cvssMetricV2"):
        for m in metrics.get(key) or []:
            score = (m.get("cvssData") or {}).get("baseScore")
            if score is not None:
                return float(score)
    return None


def _products_v2(cve: dict) -> list[str]:
    out = []
    for conf in cve.get("configurations") or []:
        for node in conf.get("nodes") or []:
            out += [m["criteria"] for m in node.get("cpeMatch") or [] if "criteria" in m]
    return out


def _products_v11(item: dict) -> list[str]:
    out = []

    def walk(nodes):
        for node in nodes or []:
            out.extend(m["cpe23Uri"] for m in node.get("cpe_match") or [] if "cpe23Uri" in m)
            walk(node.get("children"))

    walk((item.get("configurations") or {}).get("nodes"))
    return out


def parse_record(raw: dict) -> CveRecord:
    """One feed entry in either layout; raises ``NvdError`` when id or score is missing."""
    try:
        if "cve" in raw and "id" in raw["cve"]:
            cve = raw["cve"]
            cid, score, products = cve["id"], _score_v2(cve.get("metrics") or {}), _products_v2(cve)
        else:
            cid = raw["cve"]["CVE_data_meta"]["ID"]
            impact = raw.get("impact") or {}
            score = None
            for key, inner in (("baseMetricV3", "cvssV3"), ("baseMetricV2", "cvssV2")):
                if key in impact:
                    score = float(impact[key][inner]["baseScore"])
                    break
            products = _products_v11(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise NvdError(f"malformed record: {exc!r}") from exc
    if score is None or not 0.0 <= score <= 10.0:
        raise NvdError(f"{cid}: missing or out-of-range CVSS base score")
    return CveRecord(str(cid), float(score), tuple(products))


def map_apps(products) -> tuple[int, ...]:
    apps = set()
    for p in products:
        low = p.lower()
        apps.update(slot for key, slot in KEYWORDS.items() if key in low)
    return tuple(sorted(apps))


def to_exploit(rec: CveRecord, slot: int) -> ExploitSpec:
    """CVSS base score / 10 as success probability, unit value, one-step duration.

    The exploit applies to every matched app below the newest version, so
    upgrading to the top version closes it.
    """
    apps = map_apps(rec.products)
    if not apps:
        raise NvdError(f"{rec.cve_id}: no product matches the keyword table")
    windows = tuple((a, 0, N_VERSIONS - 2) for a in apps)
    return ExploitSpec(rec.cve_id, slot, ConfigReq(apps_any=windows), rec.score / 10.0, 1.0, 1)


def load_feed(path) -> list[dict]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "vulnerabilities" in data:
        return list(data["vulnerabilities"])
    if isinstance(data, dict) and "CVE_Items" in data:
        return list(data["CVE_Items"])
    if isinstance(data, list):
        return data
    raise NvdError(f"{path}: neither a JSON 2.0 nor a 1.1 NVD feed")


def ingest_nvd(path, sample: int, seed: int = 0, first_slot: int = 0) -> IngestReport:
    """Parse, map and randomly subsample ``sample`` exploits (slots assigned in sample order)."""
    if sample < 0:
        raise NvdError("sample size must be non-negative")
    items = load_feed(path)
    records, malformed, unmapped = [], 0, 0
    for raw in items:
        try:
            rec = parse_record(raw)
        except NvdError as exc:
            malformed += 1
            log.warning("skipping %s", exc)
            continue
        if not map_apps(rec.products):
            unmapped += 1
            continue
        records.append(rec)
    if malformed:
        log.warning("%d malformed NVD records skipped", malformed)
    if sample == 0:
        return IngestReport([], len(records), malformed, unmapped)
    if not records:
        raise NvdError(f"{path}: no usable CVE records")
    rng = np.random.default_rng(seed)
    take = rng.choice(len(records), size=min(sample, len(records)), replace=False)
    exploits = [to_exploit(records[i], first_slot + k) for k, i in enumerate(sorted(take))]
    return IngestReport(exploits, len(records), malformed, unmapped)
