#!/usr/bin/env python3
"""Stand-in for the GPU evaluation harness, speaking the same line protocol.

Behaviour is selected by markers in the kernel source:

  FAKE:compile_error   compiled=false with a log
  FAKE:wrong           compiled, correct=false
  FAKE:latency=<ms>    mean latency (default 1.0; baseline is 2.0)
  FAKE:bad_json        reply with a non-JSON line
  FAKE:wrong_id        reply with a mismatched request_id
  FAKE:harness_error   reply with an error field
  FAKE:gating          claim timing for a kernel that did not compile
  FAKE:exit            exit without replying

When the request asks for profiling, the file named by FAKE_NCU_CSV (if set)
is returned as the kernel profiler export.
"""
import json
import os
import re
import sys

BASELINE_MS = 2.0


def reply(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def evaluate(req):
    src = req.get("kernel_source", "")
    base = {"protocol_version": 1, "request_id": req["request_id"]}
    if "FAKE:exit" in src:
        sys.exit(3)
    if "FAKE:bad_json" in src:
        sys.stdout.write("this is not json\n")
        sys.stdout.flush()
        return
    if "FAKE:wrong_id" in src:
        base["request_id"] += 100
    if "FAKE:harness_error" in src:
        reply({**base, "error": "CUDA context lost"})
        return
    if "FAKE:gating" in src:
        reply({**base, "compiled": False, "compile_log": "error", "correct": False, "mean_latency_ms": 1.0})
        return
    if "FAKE:compile_error" in src:
        reply({**base, "compiled": False, "compile_log": "kernel.cu(3): error: expected a \";\"", "correct": False})
        return
    if "FAKE:wrong" in src:
        reply({**base, "compiled": True, "compile_log": "", "correct": False,
               "verify_log": "trial 0: max abs diff 0.5 > atol %g" % req["config"]["tolerance_abs"]})
        return
    m = re.search(r"FAKE:latency=([0-9.]+)", src)
    latency = float(m.group(1)) if m else 1.0
    out = {**base, "compiled": True, "compile_log": "", "correct": True, "verify_log": "ok",
           "mean_latency_ms": latency, "baseline_latency_ms": BASELINE_MS, "speedup": BASELINE_MS / latency,
           "samples_ms": [latency] * 4}
    if req["config"].get("profile") and os.environ.get("FAKE_NCU_CSV"):
        with open(os.environ["FAKE_NCU_CSV"]) as f:
            out["ncu_csv"] = f.read()
        out["nsys_summary"] = '"Time (%)","Total Time (ns)","Instances","Name"\n"100.0","1000000","4","k"\n'
    reply(out)


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        action = req.get("action")
        if action == "hello":
            reply({"protocol_version": 1, "request_id": req["request_id"], "device": "fake"})
        elif action == "shutdown":
            reply({"protocol_version": 1, "request_id": req["request_id"]})
            return
        elif action == "evaluate":
            evaluate(req)
        else:
            reply({"protocol_version": 1, "request_id": req["request_id"], "error": "unknown action %r" % action})


if __name__ == "__main__":
    main()
