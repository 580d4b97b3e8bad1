"""End-to-end check of the talkhead_py extension module."""

import math
import sys
import tempfile
from pathlib import Path

import talkhead_py as th


def main() -> int:
    template = th.standard_template()
    assert len(template) == 68 and len(template[0]) == 3

    tris = th.triangulate([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert len(tris) == 2, tris

    still = th.LandmarkSequence([template] * 8)
    assert len(still) == 8 and math.isclose(still.fps, th.CANONICAL_FPS)
    turned = still.edit_pose(yaw=10.0)
    assert all(abs(y - 10.0) < 1e-6 for y, _, _ in turned.head_poses())
    scores = th.evaluate(still, still)
    assert scores["d_rot"] < 1e-6 and scores["d_ll"] == 0.0
    assert len(still.resample(25.0)) > 0

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = th.synth_corpus(tmp / "corpus", speakers=2, clips=2, frames=96, content_dim=8, seed=1)
        content_ckpt, speaker_ckpt = tmp / "content.json", tmp / "speaker.json"
        losses = th.train_content(manifest, content_ckpt, steps=5, batch_size=8)
        assert len(losses) == 5 and all(math.isfinite(l) for l in losses)
        th.train_speaker(manifest, content_ckpt, speaker_ckpt, steps=3, batch_size=2)

        emb = tmp / "corpus"
        pred = th.predict(content_ckpt, emb / "s00_c000.content.arr", speaker_ckpt, emb / "s00_c000.speaker.arr")
        assert len(pred) == 96

        frames = th.animate(
            emb / "s00_c000.content.arr",
            content_ckpt,
            tmp / "out",
            speaker=emb / "s00_c000.speaker.arr",
            speaker_checkpoint=speaker_ckpt,
            synthetic_size=64,
        )
        assert len(frames) == 96 and (tmp / "out" / frames[0]).is_file()

        try:
            th.animate(emb / "missing.arr", content_ckpt, tmp / "bad")
        except ValueError:
            pass
        else:
            raise AssertionError("missing input accepted")

        loaded = th.LandmarkSequence.load(tmp / "out" / "landmarks.txt")
        assert len(loaded) == 96

    print("python smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
