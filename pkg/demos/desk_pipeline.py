"""End-to-end run of every subcommand on a tiny two-camera rig (a few seconds).

Run: python demos/desk_pipeline.py [out_dir]
"""
import json
import sys
import tempfile
from pathlib import Path

from qdbev import cli
from qdbev.geometry import BevGrid, default_rig_spec, rig_to_json

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="qdbev_"))
out.mkdir(parents=True, exist_ok=True)
(out / "rig.json").write_text(rig_to_json(default_rig_spec(2, 90.0, (16, 16)),
                                          BevGrid(h=6, w=6, cell_size=2.0)))
(out / "demo.ini").write_text(
    "[experiment]\nrig_file = rig.json\n"
    "[trainer]\nn_train = 32\nn_eval = 16\nn_calib = 4\nn_objects = 4\nteacher_epochs = 10\n"
    "[schedule]\nn1 = 2\nn2 = 4\nn3 = 6\nn4 = 8\np2 = 4\n")

for sub in (["train-teacher"], ["qat", "--oneshot"], ["qat", "--progressive"], ["vgd"],
            ["ptq-sweep"], ["report"]):
    code = cli.main([*sub, "--config", str(out / "demo.ini"), "--out", str(out / "run")])
    print(f"qdbev {' '.join(sub):18s} -> exit {code}")
    if code:
        sys.exit(code)

report = json.loads((out / "run" / "report.json").read_text())
print(f"\nfinal model {report['model']}  schemes {report['schemes']}")
print(f"BOPS {report['bops_tera']:.3e} T (FP {report['fp_bops_tera']:.3e} T)  "
      f"size {report['model_size_mb'] * 1e6:.0f} B (FP {report['fp_model_size_mb'] * 1e6:.0f} B)")
for row in report["sensitivity"]:
    print(f"  PTQ {row['label']:9s} bce {row['bce']:.4f}  degradation {row['degradation']:+.4f}")
print("ordering holds:", report["sensitivity_ordering_holds"])
print("artifacts under", out / "run")
