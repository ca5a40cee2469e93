"""
The seven-task desk run
=======================

C, B, N, then the compounds CB, CN, BN and CBN, each expanded, trained,
pruned, fine-tuned and finalized in turn, with every finished task
re-evaluated after each step.  About 10 to 15 minutes on one core.
Writes ``desk_records.csv`` and ``desk_report.md`` to the current directory.
"""

import logging

from ecmrnet.records import render_markdown, write_records
from ecmrnet.trainer import DESK, full_run, task_metrics

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

model, run, data = full_run(DESK)
write_records("desk_records.csv", run.records)
with open("desk_report.md", "w") as fh:
    fh.write(render_markdown(run.records))

for tid, tl in run.tasks.items():
    print(f"{tid:4s} degraded {tl.psnr_degraded:6.2f}  trained {tl.psnr_pre_prune:6.2f}  "
          f"pruned {tl.psnr_post_prune:6.2f}  final {tl.psnr_final:6.2f}  "
          f"params {tl.sep.params_before} -> {tl.sep.params_after}")

# the mined residual on and off, compound tasks only
for tid in ("CB", "CN", "BN", "CBN"):
    on = task_metrics(model, tid, data[tid].test)[0]
    off = task_metrics(model, tid, data[tid].test, use_skmm=False)[0]
    print(f"{tid:4s} SKMM on {on:.2f} dB, off {off:.2f} dB")
