"""IID and out-of-distribution ADE for the four style methods."""

from motionshift import suites as S

from _common import parser, setup

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    preset, seeds, data, ckpt, reports = setup(args)
    report = S.run_style_suite(preset, data, ckpt, reports, seeds)
    print(report.table([e for e, _ in S.style_environments()]))
