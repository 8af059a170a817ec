"""
A small end-to-end experiment
=============================

Simulate train and test sets, run the three estimators (fingerprinting,
hybrid two-stage, fully learned), compare their errors and time them.
The same steps are available as ``hybridinv`` subcommands.
"""

from hybridinv import pipeline as pl

cfg = pl.parse_config("""
n_train = 3000
n_test = 300
hybrid.epochs = 20
full.epochs = 20
bench_sizes = 60, 120
bench_voxels = 50
""")
train = pl.gen_dataset(cfg, "train")
test = pl.gen_dataset(cfg, "test")

# Hybrid: one NNLS over the whole dictionary, then the split network
model, losses, preds, hybrid_reports = pl.run_hybrid(cfg, train, test)
_, _, _, full_report = pl.run_full(cfg, train, test)
reports = [full_report]
for scn in cfg.scenarios:
    reports += [pl.evaluate(pl.run_fingerprint(cfg, test, scn), test, cfg), hybrid_reports[scn]]

for rep in reports:
    row = rep.rows[0]
    maes = "  ".join(f"{p} {rep.mae(p):.3f}" for p in pl.PARAMETERS)
    print(f"{row['method']:12s} {row['scenario']:13s} {maes}")

# Error in f by true volume fraction for the hybrid method
rep = hybrid_reports["groundtruth"]
for b in rep.bins:
    print(f"nu in {b}: MAE(f) {rep.mae('f', nu_bin=b):.3f}")

# Per-voxel inference times
for row in pl.benchmark(cfg):
    print(f"{row['method']:12s} N={row['n_per_block']:4d} mean {row['mean_s'] * 1e3:.3f} ms")
