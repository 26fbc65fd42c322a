"""Report figures, written next to the CSVs they summarise."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
colors = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "axes.linewidth": 0.6,
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 150,
    "lines.markersize": 4,
    "lines.linewidth": 1.2,
    "savefig.bbox": "tight",
}


def _num(x):
    try:
        return float(x)
    except (TypeError, ValueError):
        return np.nan


def _save(fig, path):
    # no Software/timestamp chunks, so reruns give identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_daily(rows, path):
    """Per-day AUC/UAUC lines from ``EvalLedger.daily()`` tuples."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        tasks = sorted({r[1] for r in rows})
        for t in tasks:
            days = [r[0] for r in rows if r[1] == t]
            ax.plot(days, [_num(r[2]) for r in rows if r[1] == t], "o-", label=f"{t} AUC")
            ax.plot(days, [_num(r[3]) for r in rows if r[1] == t], "s--", label=f"{t} UAUC")
        ax.axhline(0.5, color="0.7", lw=0.6)
        ax.set_xlabel("day")
        ax.set_ylabel("next-batch metric")
        ax.legend()
        return _save(fig, path)


def plot_ablation(rows, path):
    with plt.rc_context(params):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(fig_width * 1.6, fig_width * golden_mean))
        names = [r["variant"] for r in rows]
        y = np.arange(len(rows))
        a1.barh(y, [_num(r.get("d_auc")) for r in rows], color=colors[1])
        a1.set_yticks(y, names)
        a1.axvline(0, color="0.3", lw=0.6)
        a1.set_xlabel("CTR AUC change vs reference")
        a2.barh(y, [_num(r.get("flops_per_impression")) for r in rows], color=colors[3])
        a2.set_yticks(y, [])
        a2.set_xlabel("forward multiply-adds per impression")
        a1.invert_yaxis()
        a2.invert_yaxis()
        return _save(fig, path)


def plot_scaling(rows, path):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        x = [_num(r["log10_train_flops"]) for r in rows]
        ax.plot(x, [_num(r["final_loss"]) for r in rows], "o-")
        for xi, r in zip(x, rows):
            ax.annotate(f'{r["axis"]}={r["value"]}', (xi, _num(r["final_loss"])),
                        textcoords="offset points", xytext=(3, 3), fontsize=7)
        ax.set_xlabel("log10 training multiply-adds")
        ax.set_ylabel("final next-batch loss")
        return _save(fig, path)


def plot_perf(rows, path):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        labels = [f'{r["toggle"]} {r["setting"]}' for r in rows]
        ax.bar(range(len(rows)), [1e3 * _num(r["median_s_per_request"]) for r in rows],
               color=[colors[1] if r["setting"] == "on" else colors[3] for r in rows])
        ax.set_xticks(range(len(rows)), labels)
        ax.set_ylabel("median ms per request")
        return _save(fig, path)
