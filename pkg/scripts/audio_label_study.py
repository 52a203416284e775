"""Audio-only network trained on audio vs video labels; mAP per face count."""

from _common import emit, parser, setup

from asd.experiments import audio_label_study

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", default="0,1,2")
    args = p.parse_args()
    setup(args)
    emit(audio_label_study(seeds=tuple(int(s) for s in args.seeds.split(","))), args.out)
