"""Training smoke run: 200 synthetic scenes, R=32, 20 epochs; run twice to compare checkpoints."""

from _common import emit, parser, setup

from asd.experiments import smoke_run

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--repeat", type=int, default=2)
    args = p.parse_args()
    setup(args)
    runs = [smoke_run() for _ in range(args.repeat)]
    emit(
        {
            "runs": runs,
            "loss_ratio": runs[0]["final_L_f"] / runs[0]["first_L_f"],
            "bit_identical": len({r["checkpoint_sha256"] for r in runs}) == 1,
        },
        args.out,
    )
