"""Drive the command-line interface end to end from Python.

The same steps in a shell:

    koopflow generate --faults 6 --t-end 3 --split 5:1 --out data
    koopflow train --config cfg.json --out runs
    koopflow ablate --extension multitimescale --dataset data
    koopflow plotdata --run runs/<hash> --trajectory traj_005 --bus 0
"""
import json
import tempfile
from pathlib import Path

from koopflow.cli import main

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    main(["generate", "--faults", "6", "--t-end", "3", "--split", "5:1", "--out", str(tmp / "data")])
    (tmp / "cfg.json").write_text(json.dumps({
        "architecture": "nice", "depth": 2, "hidden": [16], "horizon": 4, "stride": 5,
        "epochs": 3, "dataset": str(tmp / "data"),
    }))
    main(["train", "--config", str(tmp / "cfg.json"), "--out", str(tmp / "runs")])
    run = next((tmp / "runs").iterdir())
    print(sorted(p.name for p in run.iterdir()))
    main(["ablate", "--extension", "multitimescale", "--dataset", str(tmp / "data"), "--stride", "5"])
    main(["plotdata", "--run", str(run), "--trajectory", "traj_005", "--bus", "0", "--out", str(tmp / "p.csv")])
    print((tmp / "p.csv").read_text().splitlines()[:3])
