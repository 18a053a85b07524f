import json, os, sys
session, phase = sys.argv[1], sys.argv[2]
info = json.load(open(os.path.join(session, "session.json")))
art = os.path.join(session, "artifact")
os.makedirs(art, exist_ok=True)
src = os.path.join(session, "competitors", info["parent_ids"][0]) if phase == "create" else art
q = float(open(os.path.join(src, "quality")).read())
q = min(1.0, q + (0.05 if phase == "create" else 0.01) * (int(info["agent_id"][-1]) % 3 - 0.5))
open(os.path.join(art, "quality"), "w").write("%.4f" % q)
open(os.path.join(session, "reasoning.md"), "a").write("%s: quality %.4f\n" % (phase, q))
