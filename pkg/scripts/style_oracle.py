"""Upper bound on what style information can buy: a plain MLP with and without the
true separation d appended to its input, trained on the pooled training styles."""

import numpy as np

from motionshift import diffcore as dc
from motionshift import suites as S
from motionshift import trainer as tr

from _common import parser, setup


def env(arrays, d, oracle):
    x = arrays.inputs
    if oracle:
        x = np.concatenate([x, np.full((len(x), 1), 5.0 * d)], axis=1)
    return tr.ArrayEnv(f"style-{d:g}", x, arrays.targets)


class Wrapped:
    def __init__(self, mlp):
        self.mlp = mlp

    def __call__(self, x):
        return dc.reshape(self.mlp(x), (x.shape[0], 12, 2))

    def parameters(self):
        return self.mlp.parameters()


if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--epochs", type=int, default=100)
    args = p.parse_args()
    preset, seeds, data_dir, _, _ = setup(args)
    data = S.load_style_data(S.ensure_style_data(data_dir, preset))
    styles = S.TRAIN_STYLES + S.TEST_STYLES
    print("input     " + "".join(f"d={d:<7g}" for d in styles))
    for oracle in (False, True):
        rows = []
        for seed in seeds:
            width = data.splits[0.1]["train"].inputs.shape[1] + int(oracle)
            model = Wrapped(dc.Mlp([width, 128, 64, 128, 24], ["relu", "relu", "relu", "identity"],
                                   rng=np.random.default_rng(seed)))
            train = [env(data.splits[d]["train"], d, oracle) for d in S.TRAIN_STYLES]
            val = [env(data.splits[d]["val"], d, oracle) for d in S.TRAIN_STYLES]
            tr.train_erm(model, train, val, tr.TrainConfig(seed=seed), epochs=args.epochs)
            rows.append([tr.ade_array(model(e.inputs).data, e.targets)
                         for e in (env(data.splits[d]["test"], d, oracle) for d in styles)])
        print(f"{'oracle' if oracle else 'plain':10s}" + "".join(f"{v:<9.3f}" for v in np.mean(rows, axis=0)))
