#!/usr/bin/env python3
"""Checks the shipped JSON schemas against bundled inputs and live CLI output.

usage: validate_schemas.py TWOPHASE_BINARY REPO_ROOT
"""

import json
import pathlib
import subprocess
import sys
import tempfile

from jsonschema import Draft202012Validator
from referencing import Registry, Resource


def check_openapi(root: pathlib.Path) -> int:
    """Every $ref in docs/openapi.yaml must resolve, locally or to a shipped schema."""
    try:
        import yaml
    except ImportError:
        print("skip openapi.yaml (no PyYAML)")
        return 0
    spec = yaml.safe_load((root / "docs" / "openapi.yaml").read_text())
    refs = []

    def walk(node):
        if isinstance(node, dict):
            refs.extend(v for k, v in node.items() if k == "$ref")
            for v in node.values():
                walk(v)
        elif isinstance(node, list):
            for v in node:
                walk(v)

    walk(spec)
    bad = 0
    for ref in refs:
        if ref.startswith("#/"):
            node = spec
            for part in ref[2:].split("/"):
                node = node.get(part) if isinstance(node, dict) else None
            ok = node is not None
        else:
            ok = (root / "docs" / ref).resolve().exists()
        if not ok:
            print(f"FAIL openapi.yaml: unresolved {ref}")
            bad += 1
    if not bad:
        print(f"ok   openapi.yaml ({len(refs)} references)")
    return bad


def main() -> int:
    binary, root = sys.argv[1], pathlib.Path(sys.argv[2])
    schemas = {}
    registry = Registry()
    for path in sorted((root / "schemas").glob("*.schema.json")):
        doc = json.loads(path.read_text())
        Draft202012Validator.check_schema(doc)
        schemas[path.name.removesuffix(".schema.json")] = doc
        registry = registry.with_resource(doc["$id"], Resource.from_contents(doc))

    failures = 0

    def check(name, doc, label):
        nonlocal failures
        errors = list(Draft202012Validator(schemas[name], registry=registry).iter_errors(doc))
        for e in errors[:3]:
            print(f"FAIL {label} against {name}: {e.message} at {list(e.absolute_path)}")
        failures += bool(errors)
        if not errors:
            print(f"ok   {label} ({name})")

    def run(*args, expect=0):
        p = subprocess.run([binary, *args], capture_output=True, text=True)
        if p.returncode != expect:
            raise SystemExit(f"{args}: exit {p.returncode}: {p.stderr}")
        return json.loads(p.stdout if expect == 0 else p.stderr)

    def reject(name, doc, label):
        nonlocal failures
        if Draft202012Validator(schemas[name], registry=registry).is_valid(doc):
            print(f"FAIL {label} should not validate against {name}")
            failures += 1
        else:
            print(f"ok   {label} rejected ({name})")

    data = root / "data"
    reject("design-request", {"strata": {"counts": [1, 2, 3, 4]}, "n": 4, "strategy": "best"}, "unknown strategy")
    reject("params", {"theta": {"beta": 0.3}}, "incomplete theta")
    reject("session-action", {"action": "ingest", "cells": [{"ystar": 2, "xstar": 0, "y": 0, "x": 0, "count": 1}]},
           "non-binary cell")
    check("strata", json.loads((data / "example_strata.json").read_text()), "example_strata.json")
    check("strata", json.loads((data / "vccc_strata.json").read_text()), "vccc_strata.json")
    check("params", json.loads((data / "synthetic_params.json").read_text()), "synthetic_params.json")
    check("scenario", json.loads((data / "desk_scenario.json").read_text()), "desk_scenario.json")
    check("session-config", json.loads((data / "session_config.json").read_text()), "session_config.json")

    golden = sorted((root / "tests" / "golden").glob("design_*.json"))
    for path in golden:
        check("design-request", json.loads(path.read_text()), path.name)
    for path in golden[:4]:
        check("design-result", run("design", "--request", str(path)), "design " + path.name)

    check("error", run("design", "--strata", str(data / "example_strata.json"), "--n", "400", "--strategy", "optmle",
                       expect=2), "validation error")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        scenario = json.loads((data / "desk_scenario.json").read_text())
        scenario.update({"N": 600, "n": 60, "replicates": 2})
        (tmp / "sc.json").write_text(json.dumps(scenario))
        summary = run("simulate", "--scenario", str(tmp / "sc.json"), "--out", str(tmp / "sim"))
        check("scenario", summary["scenario"], "simulate summary scenario")

        # Half validated, with some disagreement between true and surrogate values.
        rows = ["v,ystar,xstar,y,x"]
        for i in range(400):
            ys, xs = i % 2, (i // 2) % 2
            y = ys if i % 7 else 1 - ys
            x = xs if i % 5 else 1 - xs
            rows.append(f"1,{ys},{xs},{y},{x}" if i < 200 else f"0,{ys},{xs},,")
        (tmp / "d.csv").write_text("\n".join(rows) + "\n")
        fit = run("fit", "--data", str(tmp / "d.csv"), "--allow-boundary-nuisance")
        check("fit-result", fit, "fit output")
        check("fit-request", {"csv": (tmp / "d.csv").read_text(), "allow_boundary_nuisance": True}, "fit request")

        session = tmp / "session"
        check("session", run("wave", "--session", str(session), "init", "--config", str(data / "session_config.json")),
              "session after init")
        run("wave", "--session", str(session), "plan")
        check("session", run("wave", "--session", str(session), "status"), "session after plan")
        check("session-action", {"action": "ingest", "cells": [{"ystar": 0, "xstar": 0, "y": 0, "x": 0, "count": 3}]},
              "ingest body")

    failures += check_openapi(root)
    print(f"{failures} schema failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
