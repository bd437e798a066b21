"""Write the 50-image annotation fixture used by the format tests.

The layout copies the public ``wider_face_train_bbx_gt.txt`` files: event
directories, a trailing space on every box line, ``0`` count records carrying
one all-zero line, and the full attribute range. Box values are generated.
"""

import argparse
from pathlib import Path

import numpy as np

EVENTS = ["0--Parade", "1--Handshaking", "2--Demonstration", "3--Riot", "4--Dancing",
          "5--Car_Accident", "6--Funeral", "7--Cheering", "8--Election_Campain", "9--Press_Conference"]
ATTR_MAX = (2, 1, 1, 1, 2, 1)


def fixture_text(n_images: int = 50, seed: int = 2024) -> str:
    rng = np.random.default_rng(seed)
    lines = []
    for k in range(n_images):
        event = EVENTS[k * len(EVENTS) // n_images]
        tag = event.split("--")[1]
        lines.append(f"{event}/{event.split('--')[0]}_{tag}_{tag.lower()}_{k + 1}_{int(rng.integers(10, 999))}.jpg")
        count = 0 if k % 9 == 4 else int(rng.choice([1, 2, 3, 5, 8, 14, 27]))
        lines.append(str(count))
        if count == 0:
            lines.append("0 0 0 0 0 0 0 0 0 0 ")
        for _ in range(count):
            w = int(rng.integers(0, 300)) if rng.random() > 0.02 else 0
            h = int(w * rng.uniform(1.0, 1.4))
            x, y = int(rng.integers(0, 1024 - w)), int(rng.integers(0, 700))
            attrs = [int(rng.integers(0, m + 1)) if rng.random() < 0.3 else 0 for m in ATTR_MAX]
            lines.append(" ".join(str(v) for v in (x, y, w, h, *attrs)) + " ")
    return "\n".join(lines) + "\n"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).parents[1] / "tests" / "data" / "wider_train_head50.txt"))
    args = ap.parse_args()
    Path(args.out).write_text(fixture_text())
    print(args.out)


if __name__ == "__main__":
    main()
