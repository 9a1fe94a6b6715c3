"""Evaluation report assembly and figure emission.

The evaluation applies the error-case filters in their pipeline order
(border and low-confidence cases from the prediction pass, then the
specialist-inconsistency rule), and computes the agreement statistics over
the kept frames. All reported distances are in millimetres, converted with
the per-video pixel spacing from the manifest.
"""

import json
import os

import numpy as np

from . import metrics
from .dataio import DataFormatError
from .localizer import FilterCase, filter_specialist_frame

DEFAULT_N_GRID = [round(0.25 * i, 2) for i in range(0, 17)]


def _group_labels(records):
    by_frame = {}
    for r in records:
        if r.position is not None:
            by_frame.setdefault((r.video_id, r.frame_idx), {})[r.annotator_id] = r.position
    return by_frame


def build_report(pred_rows, label_records, manifest, image_size, n_grid=None):
    """Filter predictions, then compute the full agreement report.

    pred_rows come from localizer.read_predictions; label_records from
    dataio.load_labels. Returns (report dict, exclusion ledger rows).
    """
    n_grid = list(n_grid) if n_grid is not None else DEFAULT_N_GRID
    labels_by_frame = _group_labels(label_records)
    spacing_by_video = {e.video_id: e.pixel_spacing_mm for e in manifest.entries}
    entry_by_video = {e.video_id: e for e in manifest.entries}

    frames = []
    for vid, fidx, x, y, conf, conv, case in pred_rows:
        key = (vid, fidx)
        if vid not in spacing_by_video:
            raise DataFormatError(f"prediction for unknown video {vid!r}")
        specialists = labels_by_frame.get(key, {})
        if len(specialists) < 2:
            raise DataFormatError(
                f"frame {vid}:{fidx} has {len(specialists)} specialist labels; need >= 2"
            )
        frames.append(
            {
                "key": key,
                "pred": (float(x), float(y)),
                "confidence": conf,
                "fit_converged": conv,
                "case": case,
                "specialists": dict(sorted(specialists.items())),
                "spacing": spacing_by_video[vid],
                "entry": entry_by_video[vid],
            }
        )
    frames.sort(key=lambda f: f["key"])
    if not frames:
        raise DataFormatError("no frames to evaluate")

    ledger = []
    stage1 = []
    for f in frames:
        if f["case"] in (FilterCase.BORDER, FilterCase.LOW_CONFIDENCE_PAD):
            ledger.append((f["key"][0], f["key"][1], f["case"].value))
        else:
            stage1.append(f)

    for f in stage1:
        f["agreement"] = metrics.frame_agreement(
            f["key"], list(f["specialists"].values())
        )

    # One spread scalar drives both the inconsistency filter and the
    # tolerance axis: the mean per-frame specialist spread (in mm) over the
    # frames that survived the prediction-side filters.
    sigmas_mm = [f["agreement"].sigma * f["spacing"] for f in stage1]
    sigma_bar_mm = float(np.mean(sigmas_mm)) if sigmas_mm else float("nan")

    kept = []
    for f in stage1:
        if sigma_bar_mm > 0:
            pts_mm = [
                (p[0] * f["spacing"], p[1] * f["spacing"])
                for p in f["specialists"].values()
            ]
            ref_mm = tuple(np.asarray(f["agreement"].reference) * f["spacing"])
            verdict = filter_specialist_frame(pts_mm, ref_mm, sigma_bar_mm)
        else:
            verdict = None
        if verdict is not None and not verdict.kept:
            ledger.append((f["key"][0], f["key"][1], verdict.case.value))
        else:
            kept.append(f)
    if not kept:
        raise DataFormatError("all frames were excluded by the error-case filters")

    model_mm = np.array([np.asarray(f["pred"]) * f["spacing"] for f in kept])
    ref_mm = np.array(
        [np.asarray(f["agreement"].reference) * f["spacing"] for f in kept]
    )
    model_dist_mm = np.hypot(
        model_mm[:, 0] - ref_mm[:, 0], model_mm[:, 1] - ref_mm[:, 1]
    )
    model_stats = metrics.distance_stats(model_dist_mm)

    # leave-one-out deviations per specialist over kept frames (3+ annotators)
    annotators = sorted({a for f in kept for a in f["specialists"]})
    per_annotator_rmse = {}
    loo_all = []
    for f in kept:
        names = sorted(f["specialists"])
        if len(names) < 3:
            f["loo"] = {}
            continue
        dists, dbar = metrics.loo_specialist_deviation(
            [f["specialists"][a] for a in names]
        )
        f["loo"] = dict(zip(names, dists * f["spacing"]))
        loo_all.append(dbar * f["spacing"])
    for a in annotators:
        da = [f["loo"][a] for f in kept if a in f["loo"]]
        per_annotator_rmse[a] = float(np.sqrt(np.mean(np.square(da)))) if da else None
    rmse_values = [v for v in per_annotator_rmse.values() if v is not None]

    # ICC over kept frames with the full annotator set
    icc_frames = [f for f in kept if set(f["specialists"]) == set(annotators)]
    icc_result = None
    if len(icc_frames) >= 5 and len(annotators) >= 2:
        table = np.array(
            [
                [
                    f["agreement"].distances_to_reference[
                        sorted(f["specialists"]).index(a)
                    ]
                    * f["spacing"]
                    for a in annotators
                ]
                for f in icc_frames
            ]
        )
        value, lo, hi = metrics.icc_a_k(table)
        icc_result = {
            "value": value,
            "ci_low": lo,
            "ci_high": hi,
            "n_frames": len(icc_frames),
        }

    extent_w = image_size[0] * np.array([f["spacing"] for f in kept])
    extent_h = image_size[1] * np.array([f["spacing"] for f in kept])
    ba_x = metrics.bland_altman(model_mm[:, 0], ref_mm[:, 0], extent_w)
    ba_y = metrics.bland_altman(model_mm[:, 1], ref_mm[:, 1], extent_h)

    spec_dist_mm = np.concatenate(
        [
            np.asarray(f["agreement"].distances_to_reference) * f["spacing"]
            for f in kept
        ]
    )
    curve = metrics.tolerance_curve(model_dist_mm, spec_dist_mm, sigma_bar_mm, n_grid)

    breakdowns = {}
    for grouping, attr in (
        ("muscle", "muscle"),
        ("movement", "movement"),
        ("instrument", "instrument"),
    ):
        labels = [getattr(f["entry"], attr) for f in kept]
        breakdowns[grouping] = metrics.breakdown(model_dist_mm, labels)

    case_counts = {c.value: 0 for c in FilterCase if c is not FilterCase.NONE}
    for _, _, case in ledger:
        case_counts[case] += 1

    report = {
        "n_frames_total": len(frames),
        "n_frames_kept": len(kept),
        "exclusions": case_counts,
        "sigma_bar_mm": sigma_bar_mm,
        "specialist_mean_deviation_mm": float(np.mean(loo_all)) if loo_all else None,
        "model": {
            "rmse_mm": model_stats["rmse"],
            "sem_mm": model_stats["sem"],
            "mae_mm": model_stats["mae"],
        },
        "specialists": {
            "rmse_mm_mean": float(np.mean(rmse_values)) if rmse_values else None,
            "rmse_mm_sd": float(np.std(rmse_values, ddof=1)) if len(rmse_values) > 1 else 0.0,
            "per_annotator_rmse_mm": per_annotator_rmse,
        },
        "icc": icc_result,
        "bland_altman": {
            "x": {
                "bias_mm": ba_x["bias"],
                "loa_low_mm": ba_x["loa_low"],
                "loa_high_mm": ba_x["loa_high"],
                "pairs": ba_x["pairs"].tolist(),
            },
            "y": {
                "bias_mm": ba_y["bias"],
                "loa_low_mm": ba_y["loa_low"],
                "loa_high_mm": ba_y["loa_high"],
                "pairs": ba_y["pairs"].tolist(),
            },
        },
        "tolerance_curve": [
            {"n_star": n, "model_pct": m, "specialist_pct": s} for n, m, s in curve
        ],
        "breakdowns": breakdowns,
        "distances_mm": {
            "model": model_dist_mm.tolist(),
            "specialist_loo": loo_all,
        },
    }
    return report, sorted(ledger)


def write_report(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def load_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_ledger(ledger, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("video_id,frame_idx,filter_case\n")
        for vid, fidx, case in ledger:
            fh.write(f"{vid},{fidx},{case}\n")


def _savefig(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def write_figures(report, out_dir):
    """Emit the report's figures as SVG plus the underlying CSV data."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mtjtrack"
    os.makedirs(out_dir, exist_ok=True)

    for axis in ("x", "y"):
        ba = report["bland_altman"][axis]
        pairs = np.asarray(ba["pairs"], dtype=np.float64).reshape(-1, 2)
        with open(
            os.path.join(out_dir, f"bland_altman_{axis}.csv"),
            "w",
            encoding="utf-8",
            newline="\n",
        ) as fh:
            fh.write("mean_normalized,difference_mm\n")
            for m, d in pairs:
                fh.write(f"{m!r},{d!r}\n")
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.scatter(pairs[:, 0], pairs[:, 1], s=8, alpha=0.6)
        ax.axhline(ba["bias_mm"], linestyle="--", color="k", label="bias")
        ax.axhline(ba["loa_low_mm"], linestyle=":", color="gray", label="95% LoA")
        ax.axhline(ba["loa_high_mm"], linestyle=":", color="gray")
        ax.set_xlabel(f"normalized mean {axis}")
        ax.set_ylabel(f"difference {axis} [mm]")
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        _savefig(fig, os.path.join(out_dir, f"bland_altman_{axis}.svg"))
        plt.close(fig)

    curve = report["tolerance_curve"]
    with open(
        os.path.join(out_dir, "tolerance_curve.csv"), "w", encoding="utf-8", newline="\n"
    ) as fh:
        fh.write("n_star,model_pct,specialist_pct\n")
        for row in curve:
            fh.write(f"{row['n_star']!r},{row['model_pct']!r},{row['specialist_pct']!r}\n")
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r["n_star"] for r in curve], [r["model_pct"] for r in curve], label="model")
    ax.plot(
        [r["n_star"] for r in curve],
        [r["specialist_pct"] for r in curve],
        label="specialists",
    )
    ax.set_xlabel("tolerance distance [multiples of specialist spread]")
    ax.set_ylabel("valid frames [%]")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _savefig(fig, os.path.join(out_dir, "tolerance_curve.svg"))
    plt.close(fig)

    dists = report["distances_mm"]
    with open(
        os.path.join(out_dir, "distance_distributions.csv"),
        "w",
        encoding="utf-8",
        newline="\n",
    ) as fh:
        fh.write("series,distance_mm\n")
        for d in dists["model"]:
            fh.write(f"model,{d!r}\n")
        for d in dists["specialist_loo"]:
            fh.write(f"specialist_loo,{d!r}\n")
    fig, ax = plt.subplots(figsize=(4, 3.2))
    data = [dists["model"], dists["specialist_loo"]]
    ax.violinplot(data, showmedians=True)
    ax.set_xticks([1, 2], labels=["model", "specialists"])
    ax.set_ylabel("distance to reference [mm]")
    fig.tight_layout()
    _savefig(fig, os.path.join(out_dir, "distance_distributions.svg"))
    plt.close(fig)
