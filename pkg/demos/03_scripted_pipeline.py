"""The whole data pipeline on the bundled mini-corpus, offline.

Every model role is a scripted mock, so the run is byte-reproducible.
"""

# %%
import json
import tempfile
import warnings
from pathlib import Path

from toolforge.minicorpus import materialize
from toolforge.model import ReflectionInstance
from toolforge.pipeline import run_pipeline
from toolforge.store import load_config, read_jsonl

root = Path(tempfile.mkdtemp(prefix="toolforge-demo-"))
cfg = load_config(materialize(root), environ={})

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # two scripted refinements are rejected on purpose
    for result in run_pipeline(cfg):
        print(f"{result['stage']:15} {json.dumps(result['counts'])}")

# %% A reflection instance pairs a wrong call with the fix taken from a verified trace.
r = read_jsonl(cfg.workdir / "toolbench_r.jsonl", ReflectionInstance.from_dict)[0]
print("query:     ", r.query.text)
print("wrong:     ", r.wrong_action, "->", r.wrong_observation.to_json())
print("error kind:", r.error_kind.error_class.value, "/", r.error_kind.sub.value)
print("reflection:", r.reflection)
print("reference: ", r.reference_action)

# %% Evaluation summaries.
for name in ("eval_pass.json", "eval_refine.json", "eval_win.json"):
    summary = json.loads((cfg.workdir / name).read_text())["summary"]
    print(name, json.dumps(summary.get("all", summary)))
print("outputs in", cfg.workdir)
