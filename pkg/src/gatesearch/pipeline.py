"""The four-stage experiment pipeline: build, pre-train, search until the
resource target is met, then fine-tune with frozen gates and compile.

Every epoch ends with a checkpoint carrying all parameters, gate logits,
optimizer state, RNG state and the metric log, so an interrupted run resumes
onto the bit-identical trajectory of an uninterrupted one.
"""

from __future__ import annotations

import os

import numpy as np

from . import ops
from .archfile import write_architecture
from .checkpoint import read_container, write_container
from .config import SearchConfig, serialize_config
from .datasets import load_dataset
from .errors import ConfigError, DeadLayerError, DivergenceError, FormatError
from .gating import GateSGD
from .network import build_network, compile_network, finetune_mode, recalibrate_bn
from .optim import Adam, make_optimizer
from .resources import (RegularizerState, dense_resource, discrete_resource,
                        fit_latency, parse_latency_profile, regularizer, resource_report)
from .tensor import Tensor

__all__ = ["run_pipeline", "pretrain", "search", "finetune", "METRICS_HEADER"]

STAGES = ("pretrain", "search", "finetune")
METRICS_HEADER = "stage,epoch,step,task_loss,reg,total,resource,accuracy"
CHANNELS_HEADER = "stage,epoch,layer,active,total"
RECALIBRATION_BATCHES = 10


def _fmt(x):
    return repr(float(x))


def _stage_lr(base, epoch_index, total_epochs):
    # step decay: /10 at 50% and again at 75% of the stage's epochs
    if total_epochs <= 0:
        return base
    if epoch_index >= 0.75 * total_epochs:
        return base * 0.01
    if epoch_index >= 0.5 * total_epochs:
        return base * 0.1
    return base


class _Run:
    """Mutable pipeline state shared by the stage drivers."""

    def __init__(self, config: SearchConfig, out_dir):
        self.config = config
        self.out_dir = os.fspath(out_dir)
        self.ckpt_dir = os.path.join(self.out_dir, "checkpoints")
        self.rng = np.random.default_rng(config.seed)
        self.train, self.test = load_dataset(config)
        c, h, w = self.train.images.shape[1:]
        n_classes = int(self.train.labels.max()) + 1
        if config.dataset.kind == "synthetic-blobs":
            n_classes = config.dataset.n_classes
        self.net = build_network(config, (c, h, w), n_classes, self.rng)
        self.profile = None
        if config.search.latency_profile is not None:
            self.profile = fit_latency(parse_latency_profile(config.search.latency_profile))
        self.dense = {kind: dense_resource(self.net, kind, self.profile if kind == "latency" else None)
                      for kind in ("parameters", "flops")}
        kind = config.search.resource
        self.dense_kind = dense_resource(self.net, kind, self.profile)
        if config.search.target is not None:
            self.target = config.search.target
        elif config.search.target_fraction is not None:
            self.target = config.search.target_fraction * self.dense_kind
        else:
            self.target = None
        self.reg_state = RegularizerState(config.search.lambda_, kind, self.target)
        self.metrics = [METRICS_HEADER]
        self.channels = [CHANNELS_HEADER]
        self.global_step = 0
        self.search_success = None
        self.search_epochs_run = 0
        self.best_resource = None
        self.best_epoch = None
        self.best_state = None
        self.opt = None
        self.gate_opt = GateSGD(self.net.gate_vectors(), config.search.gate_lr)

    # -- persistence ---------------------------------------------------------

    def checkpoint_meta(self, stage, epoch):
        meta = {
            "stage": stage,
            "epoch": epoch,
            "global_step": self.global_step,
            "metrics": self.metrics,
            "channels": self.channels,
            "search_success": self.search_success,
            "search_epochs_run": self.search_epochs_run,
            "best_resource": self.best_resource,
            "best_epoch": self.best_epoch,
            "rng": self.rng.bit_generator.state,
            "adam_t": self.opt.t if isinstance(self.opt, Adam) else None,
        }
        return meta

    def save_checkpoint(self, stage, epoch):
        arrays = dict(self.net.state_arrays())
        if self.opt is not None:
            for key, arr in self.opt.state_arrays().items():
                arrays[f"opt/{key}"] = arr
        if self.best_state is not None:
            for key, arr in self.best_state.items():
                arrays[f"best/{key}"] = arr
        path = os.path.join(self.ckpt_dir, f"{stage}-{epoch:03d}.ckpt")
        write_container(path, arrays, self.checkpoint_meta(stage, epoch))

    def restore(self, path):
        arrays, meta = read_container(path)
        state = {k: v for k, v in arrays.items() if k.split("/")[0] in ("param", "buffer", "gate")}
        self.net.load_state_arrays(state)
        best = {k[len("best/"):]: v for k, v in arrays.items() if k.startswith("best/")}
        self.best_state = best or None
        self.best_resource = meta.get("best_resource")
        self.best_epoch = meta.get("best_epoch")
        self.metrics = list(meta["metrics"])
        self.channels = list(meta["channels"])
        self.global_step = meta["global_step"]
        self.search_success = meta.get("search_success")
        self.search_epochs_run = meta.get("search_epochs_run", 0)
        self.rng.bit_generator.state = meta["rng"]
        opt_arrays = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
        return meta, opt_arrays

    def write_logs(self):
        for name, lines in (("metrics.csv", self.metrics), ("channels.csv", self.channels)):
            tmp = os.path.join(self.out_dir, name + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
            os.replace(tmp, os.path.join(self.out_dir, name))

    # -- training ------------------------------------------------------------

    def make_optimizer(self, stage):
        st = getattr(self.config, stage)
        self.opt = make_optimizer(st.optimizer, self.net.parameters(), st.lr,
                                  momentum=st.momentum, weight_decay=st.weight_decay)
        return self.opt

    def log_epoch(self, stage, epoch, task, reg, total, resource, acc):
        self.metrics.append(",".join([stage, str(epoch), str(self.global_step),
                                      _fmt(task), _fmt(reg), _fmt(total),
                                      _fmt(resource), _fmt(acc)]))
        for layer_index, active, total_c in self.net.channel_summary():
            self.channels.append(f"{stage},{epoch},{layer_index},{active},{total_c}")

    def train_epoch(self, stage, epoch):
        cfg = getattr(self.config, stage)
        self.opt.lr = _stage_lr(cfg.lr, epoch - 1, cfg.epochs)
        lam = self.config.search.lambda_
        n = len(self.train)
        perm = self.rng.permutation(n)
        task_sum = reg_sum = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = Tensor(self.train.images[idx])
            logits = self.net.forward(x, training=True)
            task = ops.softmax_cross_entropy(logits, self.train.labels[idx])
            task_value = task.item()
            if not np.isfinite(task_value):
                raise DivergenceError(f"non-finite task loss in stage {stage}, epoch {epoch}")
            if stage == "search":
                reg = regularizer(self.net, self.reg_state, self.profile)
                reg_value = reg.item()
                total = task + reg.astype(np.float32) * lam if lam > 0 else task
            else:
                reg_value = 0.0
                total = task
            total.backward()
            self.opt.step()
            if stage == "search":
                self.gate_opt.step()
            self.opt.zero_grad()
            self.gate_opt.zero_grad()
            self.global_step += 1
            task_sum += task_value * len(idx)
            reg_sum += reg_value * len(idx)
            seen += len(idx)
        mean_task = task_sum / seen
        mean_reg = reg_sum / seen
        return mean_task, mean_reg, mean_task + lam * mean_reg if stage == "search" else mean_task


def _latest_checkpoint(ckpt_dir):
    if not os.path.isdir(ckpt_dir):
        return None
    best = None
    for name in os.listdir(ckpt_dir):
        if not name.endswith(".ckpt"):
            continue
        stem = name[:-len(".ckpt")]
        stage, _, epoch = stem.rpartition("-")
        if stage not in STAGES or not epoch.isdigit():
            continue
        rank = (STAGES.index(stage), int(epoch))
        if best is None or rank > best[0]:
            best = (rank, os.path.join(ckpt_dir, name))
    return best


def pretrain(run: _Run, start_epoch=0, opt_arrays=None, stop_after=None):
    """Stage 2: train the task loss only; gates stay fully open."""
    cfg = run.config.pretrain
    run.make_optimizer("pretrain")
    if opt_arrays:
        run.opt.load_state_arrays(opt_arrays)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        task, reg, total = run.train_epoch("pretrain", epoch)
        resource = discrete_resource(run.net, run.reg_state.kind, run.profile)
        acc = run.net.evaluate(run.test.images, run.test.labels)
        run.log_epoch("pretrain", epoch, task, reg, total, resource, acc)
        run.save_checkpoint("pretrain", epoch)
        run.write_logs()
        if stop_after == ("pretrain", epoch):
            return False
    return True


def search(run: _Run, start_epoch=0, opt_arrays=None, stop_after=None):
    """Stage 3: jointly optimize weights and gates until the target is met."""
    cfg = run.config.search
    run.make_optimizer("search")
    if opt_arrays:
        run.opt.load_state_arrays(opt_arrays)
    if run.search_success:
        return True  # target already reached before the interrupt
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        task, reg, total = run.train_epoch("search", epoch)
        for layer in run.net.searchable_layers():
            if not layer.union_decisions().any():
                raise DeadLayerError(
                    f"dead layer {layer.index} at search epoch {epoch}: every channel gated off")
        resource = discrete_resource(run.net, run.reg_state.kind, run.profile)
        acc = run.net.evaluate(run.test.images, run.test.labels)
        run.log_epoch("search", epoch, task, reg, total, resource, acc)
        run.search_epochs_run = epoch
        if run.target is not None and (run.best_resource is None or resource < run.best_resource):
            run.best_resource = resource
            run.best_epoch = epoch
            run.best_state = {k: np.array(v) for k, v in run.net.state_arrays().items()}
        if run.target is not None and resource <= run.target:
            run.search_success = True
            run.save_checkpoint("search", epoch)
            run.write_logs()
            return True
        run.save_checkpoint("search", epoch)
        run.write_logs()
        if stop_after == ("search", epoch):
            return False
    if run.target is not None:
        # target unreachable: fall back to the lowest-resource epoch seen
        run.search_success = False
        if run.best_state is not None:
            run.net.load_state_arrays(run.best_state)
        run.save_checkpoint("search", cfg.epochs)
    return True


def finetune(run: _Run, start_epoch=0, opt_arrays=None, stop_after=None):
    """Stage 4: freeze gates, keep training the task loss."""
    cfg = run.config.finetune
    finetune_mode(run.net)
    run.make_optimizer("finetune")
    if opt_arrays:
        run.opt.load_state_arrays(opt_arrays)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        task, reg, total = run.train_epoch("finetune", epoch)
        resource = discrete_resource(run.net, run.reg_state.kind, run.profile)
        acc = run.net.evaluate(run.test.images, run.test.labels)
        run.log_epoch("finetune", epoch, task, reg, total, resource, acc)
        run.save_checkpoint("finetune", epoch)
        run.write_logs()
        if stop_after == ("finetune", epoch):
            return False
    return True


def _finalize(run: _Run):
    """Compile, recalibrate, evaluate and write the run artifacts."""
    arch = compile_network(run.net)
    if run.config.finetune.epochs > 0:
        bs = run.config.finetune.batch_size
        batches = [run.train.images[i * bs:(i + 1) * bs]
                   for i in range(min(RECALIBRATION_BATCHES, max(1, len(run.train) // bs)))]
        batches = [b for b in batches if b.shape[0] > 0]
        recalibrate_bn(arch, batches)
    report = resource_report(arch, run.profile)
    arch.resources = {
        "parameters": report["parameters"],
        "flops": report["flops"],
        "predicted_latency_ms": report["predicted_latency_ms"],
        "head_parameters": report["head_parameters"],
        "head_flops": report["head_flops"],
        "dense_parameters": int(run.dense["parameters"]),
        "dense_flops": int(run.dense["flops"]),
    }
    arch_path = os.path.join(run.out_dir, "architecture.json")
    write_architecture(arch, arch_path)

    supernet_acc = run.net.evaluate(run.test.images, run.test.labels)
    test_acc = arch.evaluate(run.test.images, run.test.labels)
    summary_lines = [
        f"backbone = {run.config.backbone}",
        f"resource_kind = {run.reg_state.kind}",
        f"dense_resource = {_fmt(run.dense_kind)}",
        f"target_resource = {_fmt(run.target) if run.target is not None else 'none'}",
        f"search_success = {str(run.search_success).lower()}",
        f"search_epochs_run = {run.search_epochs_run}",
        f"compiled_parameters = {report['parameters']}",
        f"compiled_flops = {report['flops']}",
        f"compiled_predicted_latency_ms = "
        f"{_fmt(report['predicted_latency_ms']) if report['predicted_latency_ms'] is not None else 'none'}",
        f"supernet_test_accuracy = {_fmt(supernet_acc)}",
        f"test_accuracy = {_fmt(test_acc)}",
    ]
    for layer_index, active, total_c in run.net.channel_summary():
        summary_lines.append(f"channels.layer{layer_index} = {active}/{total_c}")
    for layer in run.net.searchable_layers():
        summary_lines.append(
            f"search_space.layer{layer.index} = 2^{layer.num_operations * layer.out_channels}")
    with open(os.path.join(run.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(summary_lines) + "\n")

    from .figures import render_run_figures
    render_run_figures(run.out_dir)
    return arch, test_acc, report


def run_pipeline(config: SearchConfig, out_dir, resume=False, stop_after=None,
                 through=None):
    """Execute stages in order; returns a summary dict.

    ``stop_after=(stage, epoch)`` ends the run right after that epoch's
    checkpoint (a controlled interrupt for resume testing); ``through``
    limits execution to everything up to and including the named stage.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    snapshot = serialize_config(config)
    snap_path = os.path.join(out_dir, "config.snapshot")
    if resume and os.path.exists(snap_path):
        with open(snap_path, "r", encoding="utf-8") as fh:
            if fh.read() != snapshot:
                raise ConfigError(f"{snap_path}: existing snapshot differs from the given config")
    else:
        with open(snap_path, "w", encoding="utf-8") as fh:
            fh.write(snapshot)

    run = _Run(config, out_dir)

    start_stage, start_epoch, opt_arrays = "pretrain", 0, None
    if resume:
        found = _latest_checkpoint(run.ckpt_dir)
        if found is not None:
            (stage_idx, epoch), path = found
            meta, opt_arrays = run.restore(path)
            start_stage, start_epoch = STAGES[stage_idx], epoch
            if start_epoch >= getattr(config, start_stage).epochs or \
                    (start_stage == "search" and run.search_success):
                # stage finished; move to the next one
                nxt = STAGES.index(start_stage) + 1
                if nxt < len(STAGES):
                    start_stage, start_epoch, opt_arrays = STAGES[nxt], 0, None
                else:
                    start_stage, start_epoch = "done", 0

    order = {"pretrain": 0, "search": 1, "finetune": 2, "done": 3}
    completed = True
    if order[start_stage] <= 0:
        completed = pretrain(run, start_epoch if start_stage == "pretrain" else 0,
                             opt_arrays if start_stage == "pretrain" else None, stop_after)
        if not completed or through == "pretrain":
            run.write_logs()
            return {"out_dir": out_dir, "completed": False, "stage": "pretrain"}
    if order[start_stage] <= 1:
        completed = search(run, start_epoch if start_stage == "search" else 0,
                           opt_arrays if start_stage == "search" else None, stop_after)
        if not completed or through == "search":
            run.write_logs()
            return {"out_dir": out_dir, "completed": False, "stage": "search",
                    "search_success": run.search_success}
    if order[start_stage] <= 2:
        completed = finetune(run, start_epoch if start_stage == "finetune" else 0,
                             opt_arrays if start_stage == "finetune" else None, stop_after)
        if not completed:
            run.write_logs()
            return {"out_dir": out_dir, "completed": False, "stage": "finetune"}
    elif start_stage == "done":
        finetune_mode(run.net)

    run.write_logs()
    arch, test_acc, report = _finalize(run)
    return {
        "out_dir": out_dir,
        "completed": True,
        "search_success": run.search_success,
        "search_epochs_run": run.search_epochs_run,
        "test_accuracy": test_acc,
        "resource_kind": run.reg_state.kind,
        "dense_resource": run.dense_kind,
        "target": run.target,
        "compiled": report,
        "architecture": os.path.join(out_dir, "architecture.json"),
    }
