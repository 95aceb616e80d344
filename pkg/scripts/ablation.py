"""Attention ablation on the two-shape scene: no modulation, cross only,
cross and self. Prints per-region cross-attention mass on the region's own
prompt tokens and self-attention leakage to other regions, at the first and
the last modulated denoising step.

    python scripts/ablation.py [--checkpoint DIR] [--json out.json]
"""

import argparse
import json

from stlayout.config import EditConfig, RegionConfig
from stlayout.layout import LayoutSet, RegionSpec
from stlayout.pipeline import cross_mass, load_denoiser, run_edit, self_leakage
from stlayout.synth import synth_video, two_shape_scene

VARIANTS = (("baseline", False, False), ("+cross", True, False), ("+cross+self", True, True))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint")
    ap.add_argument("--json")
    args = ap.parse_args()
    video = synth_video(two_shape_scene("red", "red"))
    layout = LayoutSet([RegionSpec(1, ("red", "square")), RegionSpec(2, ("red", "square"))], video["masks"])
    denoiser = load_denoiser(args.checkpoint)
    regions = [RegionConfig(1, "red square", "green square"), RegionConfig(2, "red square", "blue square")]
    table, trajectory = {}, None
    for name, cross, self_ in VARIANTS:
        cfg = EditConfig("green square and blue square on gray background", regions,
                         cross_modulation=cross, self_modulation=self_).validate()
        steps = [0, cfg.probe]
        res = run_edit(cfg, video["frames"], layout, denoiser=denoiser, probe_steps=steps,
                       trajectory=trajectory)
        trajectory = res.trajectory
        table[name] = {f"step{s}": {"cross_mass": cross_mass(res.probes[s], res.conditioning),
                                    "self_leakage": self_leakage(res.probes[s], res.conditioning)}
                       for s in steps}
        table[name]["edit_accuracy"] = res.report.edit_accuracy
    print(f"{'variant':<13} {'step':>5} {'mass r1':>8} {'mass r2':>8} {'leak r1':>8} {'leak r2':>8}")
    for name, rows in table.items():
        for step, vals in rows.items():
            if not step.startswith("step"):
                continue
            m, lk = vals["cross_mass"], vals["self_leakage"]
            print(f"{name:<13} {step[4:]:>5} {m[1]:8.4f} {m[2]:8.4f} {lk[1]:8.4f} {lk[2]:8.4f}")
        acc = rows["edit_accuracy"]
        print(f"{'':<13} edit accuracy {acc[1]:.3f} / {acc[2]:.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True, default=str)


if __name__ == "__main__":
    main()
