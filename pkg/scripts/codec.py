"""Encode a synthetic dataset with the prequential code and check the round trip."""
from pathlib import Path

from _common import parser

from preqsel import experiments as ex
from preqsel import nn
from preqsel.calib import CalibPolicy
from preqsel.optim import OptimizerSpec
from preqsel.prequential import TrainingRecipe

p = parser(__doc__)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

mix = ex.MixtureConfig(num_classes=4, examples_per_class=256)
opt = OptimizerSpec("adam", (1e-4, 3e-4, 1e-3), epochs=50, batch_size=256)
recipe = TrainingRecipe(nn.ModelSpec((mix.dim,), mix.num_classes, ex.mlp(3, 256)), opt, CalibPolicy())
r = ex.codec_agreement(mix, recipe, args.seed)
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
(out / f"codec_s{args.seed}.pqdl").write_bytes(r.message)
print(f"{r.n} labels in {r.num_blocks} blocks: {r.bit_length} bits, prequential DL {r.dl_bits:.1f} bits, "
      f"quantised Shannon bound {r.shannon_bits:.1f} bits, decoded ok: {r.decoded_ok}")
