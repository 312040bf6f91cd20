"""Compare lifting dictionaries with the encoder held at the identity.

Each row fits the operator by least squares on ``[x | a(x)]``, where ``a``
is one of the non-invertible feature maps. Decoding reads only ``x``.
"""
from koopflow.gridsim import generate_dataset, ieee14, make_faults
from koopflow.pipeline import run_ablation

ds = generate_dataset(ieee14(0), make_faults(11, 14, seed=0), seed=0, t_end=4.0)
for ext in (None, "multitimescale", "rbf_kernel", "multiscale_conv"):
    _, report = run_ablation(ds, ext, stride=2)
    print(f"{ext or 'identity':16s} train {report.rrmse_train:8.3f}%   test {report.rrmse_test:8.3f}%")
