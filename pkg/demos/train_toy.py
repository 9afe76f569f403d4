"""Train the reduced-width network on a small synthetic set and compare with DIC.

    python3 demos/train_toy.py [out_dir] [epochs]
"""
import sys

from speckle_lab.deform import (DeformationSweep, SpeckleSweep, load_manifest, load_pair,
                                make_dataset)
from speckle_lab.dic import DicPredictor
from speckle_lab.models import CnnPredictor, ModelConfig, build_model
from speckle_lab.pipeline import (TrainConfig, evaluate, load_pair_data, split_dataset, train,
                                  zero_baseline_mae)
from speckle_lab.formats import ensure_dir


def main(out="demo_out/train", epochs=5):
    out = ensure_dir(out)
    make_dataset(200, SpeckleSweep(), DeformationSweep(), out / "data", size=64, seed=0)
    data = load_pair_data(out / "data")
    tr, va, te = split_dataset(len(data), seed=0)
    cfg = TrainConfig(epochs=int(epochs), base_lr=1e-3, warmup_epochs=1)
    ck, log = train(build_model(ModelConfig(width_scale=0.125)), data.subset(tr),
                    data.subset(va), cfg,
                    log=lambda r: print(f"epoch {r.epoch}: val MAE {r.val_mae:.4f} px"))
    ck.save(out / "toy.ckpt")
    manifest, root = load_manifest(out / "data")
    test = [load_pair(root, manifest["samples"][i]) for i in te]
    report = evaluate(CnnPredictor(ck.to_model()), test, oracle=DicPredictor())
    print(f"zero baseline {zero_baseline_mae(data.subset(va)):.4f} px; "
          f"network {report['model']['mae']:.4f} px; DIC {report['oracle']['mae']:.4f} px")


if __name__ == "__main__":
    main(*sys.argv[1:])
