"""Low-shot adaptation curves on one held-out style."""

from motionshift import suites as S

from _common import parser, setup

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--target", type=float, default=0.6)
    args = p.parse_args()
    preset, seeds, data, ckpt, reports = setup(args)
    report = S.run_transfer_suite(preset, data, ckpt, reports, seeds, target=args.target)
    env = f"style-{args.target:g}"
    print("k   finetune-all  modulator-only  +refine")
    for k in range(1, 7):
        print(f"{k}   {report.mean_ade('finetune-all', env, k):12.4f}  {report.mean_ade('modulator-only', env, k):14.4f}"
              f"  {report.mean_ade('modulator-only+refine', env, k, 3):7.4f}")
