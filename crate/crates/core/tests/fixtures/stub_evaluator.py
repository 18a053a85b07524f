import json, sys, os, zlib
req = json.load(sys.stdin)
if len(sys.argv) > 1 and not os.path.exists(sys.argv[1]):
    open(sys.argv[1], "w").close()
    sys.exit("injected crash")
q = float(open(os.path.join(req["artifact_dir"], "quality")).read())
for ex in req["examples"]:
    ok = zlib.crc32((ex["example_id"] + str(q)).encode()) % 1000 < q * 1000
    print(json.dumps({"example_id": ex["example_id"], "score": float(ok), "fingerprint": str(int(ok)),
                      "diagnostics": "batch of %d" % len(req["examples"]), "agent_stdout": "q=%s" % q}))
