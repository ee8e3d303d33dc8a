"""The seven pipeline commands. Each reads its inputs from the workspace,
checks they were produced under the current configuration and records its
outputs in the manifest."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import replace

import numpy as np

from .. import hajek, ofdd, pipeline
from ..backtest.protocols import (EXTREME_SCENARIOS, ModelBundle, run_extreme, run_latency, run_long_run,
                                  run_low_data, scenario_series)
from ..lobsim import ingest_csv, write_csv
from ..netcore import checkpoint_bytes, loads_checkpoint
from ..teacher import TASKS, TeacherModel, raw_windows
from .workspace import Workspace

log = logging.getLogger(__name__)

PROTOCOLS = (("extreme", "extreme-market", run_extreme), ("long_run", "long-run", run_long_run),
             ("low_data", "low-data", run_low_data), ("latency", "latency", run_latency))


def _json_bytes(obj):
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


class Context:
    """Config, workspace and lazily loaded upstream artifacts for one command."""

    def __init__(self, rc, trace=False, probe_report=None):
        self.rc = rc
        self.ws = Workspace(rc.workspace)
        self.trace = trace
        self.probe_report = probe_report
        self.root = rc.seed
        self._cache = {}

    def stage_hash(self, stage):
        return self.rc.stage_hash(stage)

    def put(self, stage, name, data, ext, volatile=False):
        return self.ws.put_bytes(name, data, ext, stage, self.stage_hash(stage), self.root, volatile)

    def finish(self, stage, written):
        self.ws.drop_stage(stage, keep=written)
        self.ws.commit()
        return [self.ws.artifacts[n]["path"] for n in written]

    def _read(self, name, producer):
        with open(self.ws.require(name, producer, self.stage_hash(producer)), "rb") as fh:
            return fh.read()

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def series(self):
        def load():
            path = self.ws.require("series", "gen-data", self.stage_hash("gen-data"))
            return ingest_csv(path, self.rc.data.tick_size)
        return self._memo("series", load)

    def prep(self):
        return self._memo("prep", lambda: pipeline.prepare(self.series(), self.rc.data, self.rc.teacher.history_len))

    def teacher(self):
        def load():
            net, extra = loads_checkpoint(self._read("teacher", "train-teacher"))
            return TeacherModel.from_checkpoint(net, extra)
        return self._memo("teacher", load)

    def targets(self):
        return self._memo("targets", lambda: pipeline.target_sets(self.teacher(), self.prep()))

    def experts(self):
        def load():
            manifest = json.loads(self._read("experts", "distill"))
            out = []
            for entry in manifest["experts"]:
                net, extra = loads_checkpoint(self._read(f"expert:{entry['key']}", "distill"))
                out.append(ofdd.ExpertModel.from_checkpoint(net, extra))
            return out
        return self._memo("experts", load)

    def monolith(self):
        def load():
            net, extra = loads_checkpoint(self._read("monolith", "distill"))
            return ofdd.MonolithModel.from_checkpoint(net, extra)
        return self._memo("monolith", load)

    def ensemble(self):
        def load():
            kernel, _ = loads_checkpoint(self._read("kernel", "train-kernel"))
            return hajek.Ensemble(self.experts(), kernel, pipeline.fusion_config(self.rc.fusion, self.root))
        return self._memo("ensemble", load)

    def protocol_config(self):
        return replace(self.rc.backtest, seed=pipeline.sub_seed(self.root, "backtest")).validate()


def cmd_gen_data(ctx):
    """Generate or ingest the market series."""
    series = pipeline.load_series(ctx.rc.data)
    buf = io.StringIO()
    _write_series(series, buf)
    ctx.put("gen-data", "series", buf.getvalue().encode("utf-8"), "csv")
    summary = {"n_snapshots": len(series), "tick_size": series.tick_size, "source": ctx.rc.data.source}
    if series.labels is not None:
        names, counts = np.unique(np.asarray(series.labels), return_counts=True)
        summary["regime_steps"] = dict(zip(names.tolist(), counts.tolist()))
    ctx.put("gen-data", "series_summary", _json_bytes(summary), "json")
    return ctx.finish("gen-data", ["series", "series_summary"])


def _write_series(series, fh):
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "s.csv")
        write_csv(series, p)
        with open(p) as src:
            fh.write(src.read())


def cmd_train_teacher(ctx):
    """Train the surrogate teacher on the training split."""
    model, curve = pipeline.fit_teacher(ctx.prep(), ctx.rc.teacher, ctx.root)
    ctx.put("train-teacher", "teacher", checkpoint_bytes(model.net, model.checkpoint_extra()), "ckpt")
    ctx.put("train-teacher", "teacher_curve", _json_bytes(curve), "json")
    return ctx.finish("train-teacher", ["teacher", "teacher_curve"])


def cmd_probe(ctx):
    """Attribute teacher outputs to modules with the noise probe."""
    result, bands = pipeline.run_probe_stage(ctx.teacher(), ctx.prep(), ctx.rc.probe, ctx.root)
    band_lines = ["", "layer bands"] + [f"  {t} -> {b}" for t, b in bands.items()]
    text = result.to_text() + "\n".join(band_lines) + "\n"
    ctx.put("probe", "probe_report", text.encode("utf-8"), "txt")
    buf = io.StringIO()
    rows = result.table_rows()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    ctx.put("probe", "probe_table", buf.getvalue().encode("utf-8"), "csv")
    ctx.put("probe", "probe_bands", _json_bytes({"bands": bands, "attribution": result.attribution_map()}), "json")
    if ctx.probe_report:
        result.write(ctx.probe_report, band_lines)
    return ctx.finish("probe", ["probe_report", "probe_table", "probe_bands"])


def cmd_distill(ctx):
    """Distill the expert grid and the compute-matched monolith."""
    teacher, prep = ctx.teacher(), ctx.prep()
    d = pipeline.run_distill(teacher, prep, ctx.targets(), ctx.rc.distill, ctx.root)
    written, entries = [], []
    for e in d.experts:
        name = f"expert:{e.spec.key}"
        path = ctx.put("distill", name, checkpoint_bytes(e.net, e.checkpoint_extra()), "ckpt")
        entries.append(ofdd.manifest_entry(e, ctx.ws.artifacts[name]["path"], d.curves[e.spec.key]))
        written.append(name)
        log.debug("wrote %s", path)
    ctx.put("distill", "experts", _json_bytes({"experts": entries, "budget": ofdd.expert_budget(d.experts)}), "json")
    ctx.put("distill", "monolith", checkpoint_bytes(d.monolith.net, d.monolith.checkpoint_extra()), "ckpt")
    ctx.put("distill", "distill_curves", _json_bytes({"experts": d.curves, "monolith": d.monolith_curve}), "json")
    return ctx.finish("distill", written + ["experts", "monolith", "distill_curves"])


def cmd_train_kernel(ctx):
    """Fit the fusion kernel on the kernel split."""
    experts, targets = ctx.experts(), ctx.targets()
    kernel, curve = pipeline.fit_kernel(experts, targets, ctx.rc.fusion, ctx.root)
    ctx.put("train-kernel", "kernel", checkpoint_bytes(kernel, {"kind": "kernel"}), "ckpt")
    ctx.put("train-kernel", "kernel_curve", _json_bytes(curve), "json")
    written = ["kernel", "kernel_curve"]
    if ctx.trace:
        ens = hajek.Ensemble(experts, kernel, pipeline.fusion_config(ctx.rc.fusion, ctx.root))
        _, tr = ens.fuse_z(targets["test"].inputs[:256], trace=True)
        ctx.put("train-kernel", "fusion_trace", ("\n".join(tr.lines()) + "\n").encode("utf-8"), "jsonl")
        written.append("fusion_trace")
    return ctx.finish("train-kernel", written)


def cmd_backtest(ctx):
    """Run the enabled backtest protocols."""
    pc = ctx.protocol_config()
    retrain = pipeline.low_data_retrainer(ctx.teacher(), ctx.prep(), ctx.targets(), ctx.rc.distill, ctx.rc.fusion,
                                          ctx.root)
    bundle = ModelBundle(ctx.teacher(), ctx.ensemble(), ctx.experts(), retrain)
    written = []
    for flag, name, fn in PROTOCOLS:
        if not getattr(pc, flag):
            continue
        log.info("protocol %s", name)
        rep = fn(bundle, pc)
        volatile = name == "latency"
        ctx.put("backtest", f"backtest:{name}:csv", rep.to_csv().encode("utf-8"), "csv", volatile)
        ctx.put("backtest", f"backtest:{name}:txt", rep.to_text().encode("utf-8"), "txt", volatile)
        written += [f"backtest:{name}:csv", f"backtest:{name}:txt"]
    if ctx.trace:
        ens = bundle.ensemble
        h = ens.history_len
        series, start, stop = scenario_series(pc, EXTREME_SCENARIOS, "flash_crash", h)
        idx = np.arange(start, stop - 1)
        x = ens.normalization.inputs(raw_windows(series, idx, h)).reshape(len(idx), -1)
        _, tr = ens.fuse_z(x, trace=True)
        ctx.put("backtest", "backtest_trace", ("\n".join(tr.lines()) + "\n").encode("utf-8"), "jsonl")
        written.append("backtest_trace")
    return ctx.finish("backtest", written)


def _read_table(ctx, name):
    text = ctx._read(f"backtest:{name}:csv", "backtest").decode("utf-8")
    return list(csv.DictReader(io.StringIO(text)))


def cmd_report(ctx):
    """Cross-policy comparison plus held-out imitation and fusion checks."""
    ens, mono, targets = ctx.ensemble(), ctx.monolith(), ctx.targets()
    ev = pipeline.evaluate(ens, mono, targets)
    bands = json.loads(ctx._read("probe_bands", "probe"))
    pc = ctx.protocol_config()
    lines = ["# held-out evaluation (normalized units)",
             f"samples: {ev['n']}",
             "imitation MSE vs teacher, per task " + ", ".join(TASKS),
             "  fused    " + "  ".join(f"{v:.6f}" for v in ev["imitation_fused"]) +
             f"  mean {ev['imitation_fused_mean']:.6f}",
             "  monolith " + "  ".join(f"{v:.6f}" for v in ev["imitation_monolith"]) +
             f"  mean {ev['imitation_monolith_mean']:.6f}",
             "fused / best single expert (ground-truth MSE)"]
    lines += [f"  {t}: {r:.4f} (best {ev['best_single'][t]['expert']})" for t, r in ev["fused_over_best_single"].items()]
    lines += ["", "# probe", *[f"  {t} -> {b}" for t, b in bands["bands"].items()], ""]
    table = [("section", "scenario", "policy", "epnl_x1e3", "map", "pnlmap", "rpt", "sharpe", "n_trades")]
    for flag, name, _ in PROTOCOLS:
        if not getattr(pc, flag) or name == "latency":
            continue
        rows = _read_table(ctx, name)
        lines.append(f"# {name}")
        for r in rows:
            scen = r.get("scenario", "") + (f"@{r['fraction']}" if "fraction" in r else "")
            epnl = float(r["epnl"]) / 1e3
            table.append((name, scen, r["policy"], f"{epnl:.6g}", r["map"], r["pnlmap"], r["rpt"], r["sharpe"],
                          r["n_trades"]))
            lines.append(f"  {scen:<16} {r['policy']:<14} EPnL(x1e3) {epnl:>10.4g}  MAP {float(r['map']):>10.4g}  "
                         f"PnLMAP {r['pnlmap']:>10}  RPT {r['rpt']:>10}  SR {r['sharpe']:>10}")
        lines.append("")
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    ctx.put("report", "evaluation", _json_bytes(ev), "json")
    ctx.put("report", "report", "\n".join(lines).encode("utf-8"), "txt")
    ctx.put("report", "report_table", buf.getvalue().encode("utf-8"), "csv")
    written = ["evaluation", "report", "report_table"]
    if pc.latency:
        text = ctx._read("backtest:latency:txt", "backtest")
        ctx.put("report", "report_latency", text, "txt", volatile=True)
        written.append("report_latency")
    return ctx.finish("report", written)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "probe": cmd_probe,
    "distill": cmd_distill,
    "train-kernel": cmd_train_kernel,
    "backtest": cmd_backtest,
    "report": cmd_report,
}
