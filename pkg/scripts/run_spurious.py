"""ADE versus spurious strength for ERM and invariant training (optionally a lambda grid)."""

from motionshift import dataio as di
from motionshift import suites as S

from _common import parser, setup

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--lams", default=None, help="comma-separated penalty weights, e.g. 0.001,0.01,0.1,1,10,100")
    args = p.parse_args()
    preset, seeds, data, ckpt, reports = setup(args)
    lams = [float(v) for v in args.lams.split(",")] if args.lams else [preset.lam_spurious]
    report = S.run_spurious_suite(preset, data, ckpt, reports, seeds, lams)
    print(report.table([di.spurious_env_id(S.SPURIOUS_HELDOUT, a) for a in di.TEST_ALPHAS]))
    for method in S.spurious_methods(lams):
        print(f"{method:20s} ADE@64 / ADE@train = {S.degradation_ratio(report, method):.3f}")
