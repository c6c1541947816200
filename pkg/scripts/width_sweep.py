"""Calibrated held-out nats of one-hidden-layer MLPs of growing width."""
from pathlib import Path

from _common import mapper, parser, write_csv

from preqsel import experiments as ex
from preqsel.optim import OptimizerSpec

p = parser(__doc__)
p.add_argument("--widths", type=int, nargs="+", default=[8, 32, 128, 512, 2048])
p.add_argument("--seeds", type=int, default=30)
args = p.parse_args()

opt = OptimizerSpec("adam", (1e-4, 3e-4, 1e-3), epochs=50, batch_size=256)
map_fn, pool = mapper(args.jobs)
r = ex.width_sweep(ex.MixtureConfig(), args.widths, opt, sizes=(64, 256, 1024, 4096), seeds=range(args.seeds),
                   map_fn=map_fn)
if pool:
    pool.shutdown()

write_csv(Path(args.out) / "width_sweep_means.csv", ["width", "prefix_size", "nats"],
          [(w, n, repr(r.means[w][i])) for w in r.widths for i, n in enumerate(r.sizes)])
print("widest minus best per size:", [round(g, 4) for g in r.widest_gap()])
print("narrowest width within 0.02 of best:", [r.widths[i] for i in r.smallest_adequate(0.02)])
