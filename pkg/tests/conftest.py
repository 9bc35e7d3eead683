import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import pytest

from imgqsar.data import CuratedCompound


class FakeChembl:
    """In-process stand-in for the ChEMBL REST API with page_meta.next paging."""

    def __init__(self):
        self.assays = {}  # cell id -> [assay ids]
        self.activities = {}  # assay id or target id -> [rows]
        self.fail_next = 0  # number of upcoming requests answered with HTTP 503
        self.requests = []

    def page(self, rows, key, query, path):
        limit = int(query.get("limit", ["1000"])[0])
        offset = int(query.get("offset", ["0"])[0])
        chunk = rows[offset:offset + limit]
        nxt = None
        if offset + limit < len(rows):
            q = {k: v[0] for k, v in query.items()}
            q.update(limit=limit, offset=offset + limit)
            nxt = path + "?" + "&".join(f"{k}={v}" for k, v in q.items())
        return {key: chunk, "page_meta": {"next": nxt, "total_count": len(rows)}}


@pytest.fixture
def fake_chembl():
    state = FakeChembl()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *a):
            pass

        def do_GET(self):
            state.requests.append(self.path)
            if state.fail_next > 0:
                state.fail_next -= 1
                self.send_response(503)
                self.end_headers()
                return
            url = urlparse(self.path)
            q = parse_qs(url.query)
            if url.path.endswith("/assay.json"):
                ids = state.assays.get(q["cell_chembl_id"][0])
                if ids is None:
                    return self._send(404, {})
                body = state.page([{"assay_chembl_id": a} for a in ids], "assays", q, url.path)
            elif url.path.endswith("/activity.json"):
                if "target_chembl_id" in q:
                    rows = state.activities.get(q["target_chembl_id"][0], [])
                else:
                    rows = [r for a in q["assay_chembl_id__in"][0].split(",") for r in state.activities.get(a, [])]
                body = state.page(rows, "activities", q, url.path)
            else:
                return self._send(404, {})
            self._send(200, body)

        def _send(self, code, body):
            data = json.dumps(body).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.url = f"http://127.0.0.1:{server.server_address[1]}/chembl/api/data"
    yield state
    server.shutdown()


def activity_row(cid, smiles, value, relation="=", unit="nM"):
    return {"molecule_chembl_id": cid, "canonical_smiles": smiles, "standard_value": value,
            "standard_relation": relation, "standard_units": unit, "standard_type": "IC50"}


SMALL_SMILES = ["CCO", "CCN", "CCC", "c1ccccc1", "CC(=O)O", "CCCl", "c1ccncc1", "CCOC", "CC(C)O", "OCCO",
                "CCCC", "c1ccc(O)cc1", "CC(N)C(=O)O", "CCS", "C1CCCCC1", "CC#N", "COC(=O)C", "NCCO", "CCBr", "FCF"]


@pytest.fixture
def small_curated():
    return [CuratedCompound(f"C{i}", s, 5.0 + 0.1 * i) for i, s in enumerate(SMALL_SMILES)]


# -- acceptance summary: one line per numbered criterion ----------------------

_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n = mark.args[0]
    if call.when == "setup" and call.excinfo is None:
        return
    if call.excinfo is None:
        outcome = "PASS"
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        outcome = "SKIP"
    else:
        outcome = "FAIL"
    detail = dict(item.user_properties).get("detail", "")
    if outcome != "PASS" and call.excinfo is not None:
        detail = (detail + " | " if detail else "") + str(call.excinfo.value).splitlines()[0][:160]
    # a criterion with several tests fails if any part fails
    prev = _CRITERIA.get(n)
    rank = {"PASS": 0, "SKIP": 1, "FAIL": 2}
    if prev is None or rank[outcome] >= rank[prev[0]]:
        _CRITERIA[n] = (outcome, f"{item.name}: {detail}" if detail else item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {outcome}  {detail}")
