"""
One task through expand, train, prune and fine-tune
===================================================

The desk backbone is pretrained on clean images, the contrast task gets its
own path, SEP votes groups away and a short restart recovers most of the
drop.  Template and shared parameters keep their byte hashes throughout.
About two minutes on one core.
"""

from ecmrnet.backbone import expand_for_task, param_hashes, pretrain
from ecmrnet.degradations import build_task_sequence, make_sample_pool
from ecmrnet.metrics import batch_metrics
from ecmrnet.sep import run_sep
from ecmrnet.trainer import (DESK, build_desk_model, count_active_cost, finalize, finetune,
                             make_data, task_metrics, train_task)

cfg = DESK
task = build_task_sequence()[0]                     # "C": contrast only
clean, data = make_data([task], cfg)
train, test = data["C"].train, data["C"].test

model = build_desk_model(cfg.seed)
pretrain(model, clean, cfg.epochs_pretrain, cfg.batch, cfg.lr_init * 2, cfg.lr_final * 2, cfg.seed)
frozen = param_hashes(model)
print("degraded input  %.2f dB" % batch_metrics(test.degraded, test.clean)[0])

expand_for_task(model, task)
train_task(model, task, train, cfg)
print("trained path    %.2f dB   params, MACs %s" % (task_metrics(model, "C", test)[0],
                                                      count_active_cost(model, "C")))

pool = make_sample_pool(task, cfg.pool_size, cfg.seed, cfg.image_size, clean=train.clean)
_, report = run_sep(model, "C", pool, cfg.rho)
print("after pruning   %.2f dB   params, MACs %s" % (task_metrics(model, "C", test)[0],
                                                      count_active_cost(model, "C")))
print("kept groups per stage:", report.retained)

res = finetune(model, "C", train, cfg, test=test)
finalize(model, "C")
print("fine-tuned      %.2f dB   per-epoch %s" % (task_metrics(model, "C", test)[0],
                                                   ["%.2f" % p for p in res.psnr_curve]))
print("template untouched:", all(param_hashes(model)[k] == h for k, h in frozen.items()))
