"""Scripted-oracle client for a running ``serve`` instance.

Polls the gateway, answers each distinct QuerySet exactly once using the
rule table, and exits when the server goes away (training finished).
Prototype diagnostics come from the snapshot; merge distances are not on
the wire, so remote merge decisions fall back to the budget rule.
"""

from __future__ import annotations

import json
import time
import urllib.error
import urllib.request

from .hitl import (ActionQuery, OracleRules, PrototypeQuery, QuerySet,
                   ScriptedOracle, action_uncertainty)


def _get(url: str) -> dict | None:
    try:
        with urllib.request.urlopen(url, timeout=5.0) as resp:
            return json.loads(resp.read())
    except (urllib.error.URLError, ConnectionError, json.JSONDecodeError, OSError):
        return None


def _post(url: str, body: dict) -> tuple[int, dict]:
    req = urllib.request.Request(url, data=json.dumps(body).encode(),
                                 headers={"Content-Type": "application/json"},
                                 method="POST")
    try:
        with urllib.request.urlopen(req, timeout=5.0) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as e:
        try:
            return e.code, json.loads(e.read())
        except Exception:
            return e.code, {}
    except (urllib.error.URLError, ConnectionError, OSError):
        return 0, {}


def queryset_from_wire(snapshot: dict) -> QuerySet:
    """Rebuild the internal QuerySet from a wire snapshot (diagnostics joined
    from the prototype stats)."""
    stats = {p["id"]: p for p in snapshot.get("prototypes", [])}
    q = snapshot.get("queries", {})
    protos = [PrototypeQuery(id=pid,
                             mu=float(stats.get(pid, {}).get("mu", 1.0)),
                             mean_dist=float(stats.get(pid, {}).get("mean_dist", 0.0)),
                             members=int(stats.get(pid, {}).get("members", 0)))
              for pid in q.get("prototypes", [])]
    actions = [ActionQuery(traj=a["traj"], step=int(a["step"]), a=float(a["a"]),
                           a_expert=float(a["a_expert"]),
                           mu=action_uncertainty(float(a["a"])), risk=bool(a["risk"]))
               for a in q.get("actions", [])]
    merges = [tuple(pair) for pair in q.get("merge_suggestions", [])]
    return QuerySet(iteration=int(snapshot.get("iteration", 0)),
                    prototype_queries=protos, action_queries=actions,
                    suggested_merges=merges, merge_distances=[])


def run_oracle(url: str, rules: OracleRules | None = None, poll_seconds: float = 0.2,
               max_polls: int | None = None) -> dict:
    """Answer queries until the server disappears; returns a summary dict."""
    oracle = ScriptedOracle(rules or OracleRules())
    base = url.rstrip("/")
    seen: set[str] = set()
    seq = 0
    posted = 0
    rejected = 0
    polls = 0
    misses = 0
    while True:
        snapshot = _get(base + "/state")
        polls += 1
        if snapshot is None:
            misses += 1
            if misses >= 5:
                break
            time.sleep(poll_seconds)
            continue
        misses = 0
        q = snapshot.get("queries", {})
        nonempty = any(q.get(k) for k in ("prototypes", "actions", "merge_suggestions"))
        key = json.dumps(q, sort_keys=True)
        if nonempty and key not in seen:
            seen.add(key)
            for event in oracle.decide(queryset_from_wire(snapshot)):
                seq += 1
                event = dict(event, seq=seq)
                status, body = _post(base + "/feedback", event)
                if status == 409:  # another source advanced the sequence; catch up
                    last = int(str(body.get("reason", "0")).rsplit("=", 1)[-1].rstrip(")")
                               or 0)
                    seq = max(seq, last) + 1
                    status, body = _post(base + "/feedback", dict(event, seq=seq))
                if status == 200:
                    posted += 1
                else:
                    rejected += 1
        if max_polls is not None and polls >= max_polls:
            break
        time.sleep(poll_seconds)
    return {"answered_querysets": len(seen), "events_posted": posted,
            "events_rejected": rejected, "polls": polls}
