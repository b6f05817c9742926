"""Report rendering: delimited/key-value documents plus matplotlib figures.

Every report path writes machine-readable text first and drops a rendered
figure next to it; stdout carries the human-readable summary only.
"""

import math
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _fmt(x):
    if x is None:
        return "-"
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        return f"{x:.6g}"
    return str(x)


def write_metric_report(report, out_dir, stem="metrics"):
    """Write a metric report as TSV + key=value, with a bar-chart figure."""
    os.makedirs(out_dir, exist_ok=True)
    tsv_path = os.path.join(out_dir, f"{stem}.tsv")
    kv_path = os.path.join(out_dir, f"{stem}.kv")
    fig_path = os.path.join(out_dir, f"{stem}.png")

    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write("metric\tvalue\tstderr\tn\tparams\n")
        for v in report.values:
            params = ",".join(f"{k}={_fmt(val)}" for k, val in sorted(v.params.items()))
            f.write(f"{v.name}\t{_fmt(v.value)}\t{_fmt(v.stderr)}\t{v.n}\t{params}\n")

    with open(kv_path, "w", encoding="utf-8") as f:
        for v in report.values:
            f.write(f"{v.name}.value = {_fmt(v.value)}\n")
            if v.stderr is not None:
                f.write(f"{v.name}.stderr = {_fmt(v.stderr)}\n")
            f.write(f"{v.name}.n = {v.n}\n")
            for k, val in sorted(v.params.items()):
                f.write(f"{v.name}.params.{k} = {_fmt(val)}\n")

    finite = [v for v in report.values if math.isfinite(v.value)]
    if finite:
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(finite)), 3.2))
        names = [v.name for v in finite]
        vals = [v.value for v in finite]
        errs = [v.stderr if v.stderr is not None else 0.0 for v in finite]
        ax.bar(range(len(names)), vals, yerr=errs, capsize=3, color="#4c72b0")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("value")
        ax.set_title("evaluation metrics")
        fig.tight_layout()
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)

    return tsv_path, kv_path, fig_path


def format_metric_table(report):
    lines = [f"{'metric':<16} {'value':>12} {'stderr':>10} {'n':>6}"]
    for v in report.values:
        se = _fmt(v.stderr) if v.stderr is not None else "-"
        lines.append(f"{v.name:<16} {_fmt(v.value):>12} {se:>10} {v.n:>6}")
    return "\n".join(lines)


def write_train_log(log, out_dir, stem="train_log"):
    """Write the per-step loss log as TSV and render the loss/KL curves."""
    os.makedirs(out_dir, exist_ok=True)
    tsv_path = os.path.join(out_dir, f"{stem}.tsv")
    fig_path = os.path.join(out_dir, f"{stem}.png")

    cols = ["step", "epoch", "lr", "total", "l_rec", "l_kl", "l_g", "kl_step"]
    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write("\t".join(cols) + "\n")
        for entry in log:
            f.write("\t".join(_fmt(entry[c]) for c in cols) + "\n")

    if log:
        steps = [e["step"] for e in log]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
        for key, color in (("total", "#333333"), ("l_rec", "#4c72b0"), ("l_g", "#55a868")):
            ax1.plot(steps, [e[key] for e in log], label=key, color=color, lw=0.9)
        ax1.set_xlabel("step")
        ax1.set_yscale("log")
        ax1.set_title("loss components")
        ax1.legend(fontsize=8)
        ax2.plot(steps, [e["kl_step"] for e in log], color="#c44e52", lw=0.9)
        ax2.set_xlabel("step")
        ax2.set_title("mean per-step KL")
        fig.tight_layout()
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)

    return tsv_path, fig_path
