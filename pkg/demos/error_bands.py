"""Where each anomaly kind lands relative to the normal error band.

Trains a small model on rendered normal frames, fits a two-sided band on
held-out normal frames, then prints error percentiles per anomaly kind and
which side of the band catches it. Haze and defocus remove fine detail the
model cannot reproduce anyway, so they tend to fall below the band; bleeding,
occlusion and a withdrawn camera change the content and land above it.

    python demos/error_bands.py
"""

import numpy as np

from rdae import detector, synth
from rdae.imageio import resize_bilinear, to_chw
from rdae.model import ModelConfig, build
from rdae.tensor import RngState
from rdae.trainer import TrainConfig, fit

SIZE = 32
SPEC = synth.SceneSpec(seed=0, size=64)


def frames(images):
    return np.stack([to_chw(resize_bilinear(im, SIZE)) for im in images])


def errors(model, x):
    return np.concatenate([detector.batch_errors(model, x[i : i + 64]) for i in range(0, len(x), 64)])


def main():
    train = frames([f.image for f in synth.generate_normal(SPEC, 600)])
    model = fit(train, build(ModelConfig(input_size=SIZE, levels=3, channels_per_level=(8, 16, 32)), 0),
                TrainConfig(batch_size=16, max_epochs=8, input_size=SIZE),
                progress=lambda h: print(f"epoch {h.epoch}: mean rmse {h.mean_rmse:.2f}")).model

    calib = synth.generate_normal(SPEC, 200, start=1000)
    band = detector.calibrate(errors(model, frames([f.image for f in calib])))
    print(f"\nband from 200 held-out normal frames: [{band.lower:.2f}, {band.upper:.2f}]\n")

    held_out = synth.generate_normal(SPEC, 200, start=1500)
    print(f"{'kind':<12} {'p5':>6} {'median':>7} {'p95':>6}  lower  upper")
    for kind in ["normal", *[k.value for k in synth.AnomalyKind]]:
        if kind == "normal":
            images = [f.image for f in held_out]
        else:
            images = [synth.inject_anomaly(f, kind, 0.6, RngState(7).child(f.frame_index)).image for f in held_out]
        e = errors(model, frames(images))
        sides = [detector.classify(v, band).bound for v in e]
        p5, p50, p95 = np.percentile(e, [5, 50, 95])
        print(f"{kind:<12} {p5:6.2f} {p50:7.2f} {p95:6.2f}  {sides.count('lower'):5d}  {sides.count('upper'):5d}")


if __name__ == "__main__":
    main()
