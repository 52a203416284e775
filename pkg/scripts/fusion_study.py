"""Proposed vs naive vs hierarchical fusion on crowded scenes with small faces."""

from _common import emit, parser, setup

from asd.experiments import fusion_study

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--no-calibrate", action="store_true")
    args = p.parse_args()
    setup(args)
    emit(fusion_study(seeds=tuple(int(s) for s in args.seeds.split(",")), calibrate=not args.no_calibrate), args.out)
