"""Stage-4 validation curves with and without contrastive pre-training."""

import json

from motionshift import suites as S

from _common import parser, setup

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    preset, seeds, data, ckpt, reports = setup(args)
    print(json.dumps(S.run_contrastive_ablation(preset, data, ckpt, reports, seeds), indent=2))
