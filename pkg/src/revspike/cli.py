"""Command-line operator surface.

Subcommands:

* ``train``     -- train per a run configuration; writes ``metrics.csv``
  (deterministic given the seed), ``timing.csv`` (wall times, kept out of
  the deterministic file on purpose) and a final weights checkpoint.
* ``eval``      -- test-set accuracy of a checkpoint.
* ``gradcheck`` -- reversible-vs-store-everything equivalence plus a
  finite-difference sweep; nonzero exit on tolerance violation.
* ``memcheck``  -- ledger-peak table across T in {2,4,8} for both backward
  modes, asserting the flat-vs-linear scaling split.
* ``energy``    -- firing rates on a calibration batch and the theoretical
  energy report as CSV.
* ``analyze``   -- trains baseline/case1/case2 runs from one init on the
  fully-temporal wiring and emits per-epoch gradient cosine similarities.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_weights, save_weights
from .config import RunConfig, parse_config_file, serialize_config
from .data import load_dataset
from .engine import (
    ActivationLedger,
    backward_masked,
    backward_reversible,
    backward_stbp,
    optimizer_step,
)
from .metrics import (
    cosine_similarity,
    count_flops,
    estimate_energy,
    firing_rate,
    gradient_signature,
    grouped_flop_table,
)
from .network import forward_full, init_weights, named_parameters
from .verify import finite_difference_check, gradient_equivalence, measure_memory_scaling

__all__ = ["main", "cmd_train", "cmd_eval", "cmd_gradcheck", "cmd_memcheck",
           "cmd_energy", "cmd_analyze", "train_run", "evaluate_accuracy"]


def _backward(mode: str):
    if mode == "stbp":
        return lambda *a, **k: backward_stbp(*a, **k)
    if mode == "reversible":
        return lambda *a, **k: backward_reversible(*a, **k)
    return lambda x, y, w, c, ledger=None, label_smoothing=0.0: backward_masked(
        x, y, w, c, mode, ledger, label_smoothing)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_accuracy(x, y, weights, config, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        logits, _ = forward_full(x[start:start + batch_size], weights, config,
                                 keep_traces=True)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[start:start + batch_size]))
    return correct / len(x)


def train_run(run: RunConfig, record_signatures: bool = False, quiet: bool = False):
    """Train one run; returns a result dict.

    ``record_signatures`` adds a per-epoch gradient signature, measured with
    the unmasked store-everything backward on a fixed probe batch at the
    current weights — the same measurement operator for every run, so runs
    differ only through their training trajectories. The epoch-0 entry is
    taken before any update.
    """
    cfg = replace(run.network, seed=run.seed)
    x_tr, y_tr, x_te, y_te = load_dataset(run.dataset, seed=run.seed)
    weights = init_weights(cfg)
    params = dict(named_parameters(weights))
    backward = _backward(run.mode)
    rng = np.random.default_rng(run.seed)
    velocity = None
    metrics_rows = []
    timing_rows = []
    signatures = []
    probe = None
    if record_signatures:
        probe_idx = np.arange(min(len(x_tr), max(256, run.batch_size)))
        probe = (x_tr[probe_idx], y_tr[probe_idx])
        g, _ = backward_stbp(probe[0], probe[1], weights, cfg,
                             label_smoothing=run.label_smoothing)
        signatures.append(gradient_signature(g))
    last_good = {name: p.copy() for name, p in params.items()}
    for epoch in range(run.epochs):
        t0 = time.perf_counter()
        losses = []
        peak = 0
        for idx in _batches(len(x_tr), run.batch_size, rng):
            ledger = ActivationLedger()
            try:
                grads, aux = backward(x_tr[idx], y_tr[idx], weights, cfg,
                                      ledger, label_smoothing=run.label_smoothing)
            except FloatingPointError as exc:
                return {"weights": weights, "metrics": metrics_rows, "timing": timing_rows,
                        "signatures": signatures, "config": cfg,
                        "failed": f"{exc} at epoch {epoch}", "last_good": last_good}
            if not np.isfinite(aux["loss"]):
                return {"weights": weights, "metrics": metrics_rows, "timing": timing_rows,
                        "signatures": signatures, "config": cfg,
                        "failed": f"non-finite loss at epoch {epoch}", "last_good": last_good}
            losses.append(float(aux["loss"]))
            peak = max(peak, ledger.peak_bytes)
            velocity = optimizer_step(params, grads, run.lr, run.momentum, velocity)
        last_good = {name: p.copy() for name, p in params.items()}
        train_acc = evaluate_accuracy(x_tr, y_tr, weights, cfg)
        test_acc = evaluate_accuracy(x_te, y_te, weights, cfg)
        metrics_rows.append({
            "epoch": epoch, "loss": float(np.mean(losses)),
            "train_acc": train_acc, "test_acc": test_acc, "ledger_peak_bytes": peak,
        })
        timing_rows.append({"epoch": epoch, "wall_time_s": time.perf_counter() - t0})
        if record_signatures:
            g, _ = backward_stbp(probe[0], probe[1], weights, cfg,
                                 label_smoothing=run.label_smoothing)
            signatures.append(gradient_signature(g))
        if not quiet:
            print(f"epoch {epoch}: loss {metrics_rows[-1]['loss']:.4f} "
                  f"train {train_acc:.4f} test {test_acc:.4f} peak {peak} B")
    return {"weights": weights, "metrics": metrics_rows, "timing": timing_rows,
            "signatures": signatures, "config": cfg, "failed": None, "last_good": None}


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,loss,train_acc,test_acc,ledger_peak_bytes\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['loss']:.6f},{r['train_acc']:.6f},"
                     f"{r['test_acc']:.6f},{r['ledger_peak_bytes']}\n")


def _write_timing_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,wall_time_s\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['wall_time_s']:.3f}\n")


def _load_run(args) -> RunConfig:
    run = parse_config_file(args.config)
    if args.seed is not None:
        run = replace(run, seed=args.seed,
                      network=replace(run.network, seed=args.seed))
    if args.out is not None:
        run = replace(run, out_dir=args.out)
    return run


def cmd_train(args) -> int:
    run = _load_run(args)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train_run(run)
    config_text = serialize_config(run)
    if result["failed"]:
        print(f"ERROR: {result['failed']}", file=sys.stderr)
        last_good = result["last_good"]
        ckpt = out / "last_good.ckpt"
        for name, p in dict(named_parameters(result["weights"])).items():
            p[...] = last_good[name]
        save_weights(ckpt, result["weights"], config_text)
        print(f"last-good checkpoint written to {ckpt}", file=sys.stderr)
        _write_metrics_csv(out / "metrics.csv", result["metrics"])
        _write_timing_csv(out / "timing.csv", result["timing"])
        return 1
    _write_metrics_csv(out / "metrics.csv", result["metrics"])
    _write_timing_csv(out / "timing.csv", result["timing"])
    save_weights(out / "weights.ckpt", result["weights"], config_text)
    if result["metrics"]:
        final = result["metrics"][-1]
        print(f"final test accuracy {final['test_acc']:.4f}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    run = _load_run(args)
    cfg = replace(run.network, seed=run.seed)
    _, _, x_te, y_te = load_dataset(run.dataset, seed=run.seed)
    weights = init_weights(cfg)
    load_weights(args.checkpoint, weights)
    acc = evaluate_accuracy(x_te, y_te, weights, cfg)
    print(f"test accuracy {acc:.4f} on {len(x_te)} samples")
    return 0


def cmd_gradcheck(args) -> int:
    run = _load_run(args)
    cfg = replace(run.network, seed=run.seed)
    ok = True
    if cfg.temporal_mode == "boundary":
        eq = gradient_equivalence(cfg, seeds=range(10))
        print(f"gradient equivalence: max rel err {eq.max_rel_err:.3e} over 10 seeds "
              f"(reconstruction {eq.max_reconstruction_err:.3e})")
        if eq.max_rel_err >= 1e-4:
            print("FAIL: equivalence tolerance 1e-4 exceeded", file=sys.stderr)
            ok = False
    fd = finite_difference_check(cfg, seed=run.seed)
    print(f"finite differences: max rel err {fd.max_rel_err:.3e} (worst: {fd.worst_param})")
    if fd.max_rel_err >= 1e-3:
        print("FAIL: finite-difference tolerance 1e-3 exceeded", file=sys.stderr)
        ok = False
    return 0 if ok else 1


def cmd_memcheck(args) -> int:
    run = _load_run(args)
    report = measure_memory_scaling(run.network, timesteps=[2, 4, 8], seed=run.seed)
    print("T  reversible_peak_B  store_everything_peak_B")
    for t, rev, stbp in zip(report.timesteps, report.reversible_peaks, report.stbp_peaks):
        print(f"{t:<2} {rev:>17} {stbp:>23}")
    variation = report.reversible_variation()
    ratios = report.stbp_doubling_ratios()
    print(f"reversible peak variation: {variation * 100:.2f}%  "
          f"store-everything doubling ratios: {[f'{r:.2f}' for r in ratios]}")
    if variation >= 0.05:
        print("FAIL: reversible peak varies by >= 5% across T", file=sys.stderr)
        return 1
    if any(r < 1.8 for r in ratios):
        print("FAIL: store-everything peak grows < 1.8x per doubling", file=sys.stderr)
        return 1
    print("PASS")
    return 0


def collect_firing_rates(x, weights, config) -> dict[str, float]:
    """Per-layer input firing rates over a calibration batch.

    Layer names match :func:`count_flops`; grouped runs average each layer's
    rate over the T sub-network passes.
    """
    _, trace = forward_full(x, weights, config, keep_traces=True)
    acc: dict[str, list[float]] = {}
    for step in trace.steps:
        for s, st in enumerate(step.stages):
            for b, it in enumerate(st.block_internals):
                acc.setdefault(f"s{s}.b{b}.dw", []).append(firing_rate(it.s1))
                acc.setdefault(f"s{s}.b{b}.pw", []).append(firing_rate(it.s2))
            acc.setdefault(f"s{s}.turnon", []).append(firing_rate(st.s_stage))
    rates = {name: float(np.mean(vals)) for name, vals in acc.items()}
    rates["head"] = firing_rate(trace.pooled)
    return rates


def cmd_energy(args) -> int:
    run = _load_run(args)
    cfg = replace(run.network, seed=run.seed)
    _, _, x_te, _ = load_dataset(run.dataset, seed=run.seed)
    weights = init_weights(cfg)
    if args.checkpoint:
        load_weights(args.checkpoint, weights)
    calib = x_te[: max(64, min(len(x_te), 64))]
    rates = collect_firing_rates(calib, weights, cfg)
    table = count_flops(cfg)
    if cfg.grouped_encoding:
        table = grouped_flop_table(table, cfg.timesteps)
    report = estimate_energy(table, rates, cfg.timesteps)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "energy.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    print(f"total {report.total_pj:.3f} pJ; report written to {out / 'energy.csv'}")
    return 0


def cmd_analyze(args) -> int:
    run = _load_run(args)
    if run.network.temporal_mode != "full":
        print("ERROR: analyze requires network.temporal_mode = full", file=sys.stderr)
        return 1
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for mode in ("stbp", "case1", "case2"):
        results[mode] = train_run(replace(run, mode=mode), record_signatures=True, quiet=True)
        if results[mode]["failed"]:
            print(f"ERROR: {mode} run failed: {results[mode]['failed']}", file=sys.stderr)
            return 1
        print(f"{mode}: final test acc {results[mode]['metrics'][-1]['test_acc']:.4f}")
    rows = []
    for epoch in range(len(results["stbp"]["signatures"])):
        base = results["stbp"]["signatures"][epoch]
        rows.append({
            "epoch": epoch,
            "cos_case1": cosine_similarity(base, results["case1"]["signatures"][epoch]),
            "cos_case2": cosine_similarity(base, results["case2"]["signatures"][epoch]),
        })
    with open(out / "cosine.csv", "w", newline="") as fh:
        fh.write("epoch,cos_baseline_case1,cos_baseline_case2\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['cos_case1']:.6f},{r['cos_case2']:.6f}\n")
    trained = [r for r in rows if r["epoch"] > 0]
    mean1 = float(np.mean([r["cos_case1"] for r in trained]))
    mean2 = float(np.mean([r["cos_case2"] for r in trained]))
    print(f"mean cosine vs baseline -- case1: {mean1:.4f}, case2: {mean2:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="revspike")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_ckpt in (
        ("train", cmd_train, False), ("eval", cmd_eval, True),
        ("gradcheck", cmd_gradcheck, False), ("memcheck", cmd_memcheck, False),
        ("energy", cmd_energy, True), ("analyze", cmd_analyze, False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if needs_ckpt:
            p.add_argument("--checkpoint", required=(name == "eval"), default=None)
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
