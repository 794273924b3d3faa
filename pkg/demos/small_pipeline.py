"""The whole pipeline on a toy world through the library API, stage by stage.

    python demos/small_pipeline.py [out_dir]

Same stages as ``distillrec run-all`` with a config small enough to finish in
well under a minute. Rerunning with the same directory skips finished stages.
"""
import sys

from distillrec import pipeline
from distillrec.config import parse_config

CONFIG = """
[env]
n_items = 20
n_users = 30
log_sessions = 2
log_session_len = 10
session_len = 10
[teacher]
epochs = 3
steps_per_epoch = 200
[distill]
max_states = 600
[eval]
sessions = 600
teacher_sessions = 300
batch = 300
[bench]
repetitions = 200
"""

out = sys.argv[1] if len(sys.argv) > 1 else "demo-run"
cfg = parse_config(CONFIG)
ws = pipeline.Workspace(out)
for name, res in pipeline.run_all(cfg, ws).items():
    status = "skipped (up to date)" if res["skipped"] else "done"
    print(f"{name:15s} {status}")

summary = ws.read_manifest()["stages"]
print()
print(summary["evaluate"]["summary"]["table"])
print()
print(pipeline.bench_table(summary["bench"]["summary"]))
