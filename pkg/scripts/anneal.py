"""Fixed 50-epoch schedule vs. plateau-driven annealing on 1024 examples."""
from _common import parser

from preqsel import experiments as ex

p = parser(__doc__)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

r = ex.anneal_vs_fixed(ex.MixtureConfig(), seed=args.seed)
print(f"lr {r.lr:g}: fixed {r.fixed_steps} steps -> {r.fixed_nats:.4f} nats; "
      f"annealed {r.anneal_steps} steps ({r.lr_drops} drops) -> {r.anneal_nats:.4f} nats")
