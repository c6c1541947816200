"""Rank logistic regression vs. two MLPs across prefix sizes, then by MDL."""
from pathlib import Path

from _common import mapper, parser, write_csv

from preqsel import experiments as ex
from preqsel.optim import OptimizerSpec

p = parser(__doc__)
p.add_argument("--seeds", type=int, default=5)
p.add_argument("--mdl-seeds", type=int, default=3)
p.add_argument("--epochs", type=int, default=50)
args = p.parse_args()

models = {"logreg": (), "mlp": ex.mlp(3, 256), "mlp_dropout": ex.mlp(3, 256, dropout=0.5)}
opt = OptimizerSpec("adam", (1e-4, 3e-4, 1e-3), epochs=args.epochs, batch_size=256)
map_fn, pool = mapper(args.jobs)
r = ex.ranking_preservation(ex.MixtureConfig(), models, opt, seeds=range(args.seeds),
                            mdl_seeds=range(args.mdl_seeds), map_fn=map_fn)
if pool:
    pool.shutdown()

out = Path(args.out)
write_csv(out / "ranking_means.csv", ["prefix_size", "model", "nats"],
          [(n, m, repr(v[i])) for m, v in r.means.items() for i, n in enumerate(r.sizes)])
write_csv(out / "ranking_snr.csv", ["prefix_size", "a", "b", "delta", "snr"],
          [(n, a, b, repr(e.delta), repr(e.snr)) for (n, a, b), e in r.snr.items()])
write_csv(out / "ranking_dl.csv", ["model", "dl_nats", "uncertainty"],
          [(m, repr(e.dl), repr(e.uncertainty)) for m, e in r.dl.items()])
print("full-data ranking:", r.full_ranking)
print("MDL ranking:      ", r.mdl_ranking)
print("resolved-pair violations:", r.violations or "none")
