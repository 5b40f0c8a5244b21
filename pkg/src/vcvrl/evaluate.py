"""Checkpoint evaluation.

Only the backbone is loaded here; this module deliberately has no access to
the Siamese head, pools or descriptors.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

from .checkpoint import Checkpoint, load_segnet, read_checkpoint
from .metrics import aggregate, confusion, scores
from .segnet import SegNet, SegNetConfig, infer_padded
from .synthdata import VolumeSample


def evaluate_volumes(net: SegNet, samples: Sequence[VolumeSample], prefix: str = "test") -> List[dict]:
    records = []
    for i, s in enumerate(samples):
        probs = infer_padded(net, s.volume)
        rec = {"volume_id": f"{prefix}_{i:03d}", **scores(confusion(probs, s.label))}
        records.append(rec)
    return records


def run_eval(
    checkpoint,
    samples: Sequence[VolumeSample],
    expected: Optional[SegNetConfig] = None,
) -> Tuple[List[dict], dict]:
    """Per-volume records and an aggregate record for ``samples``.

    ``checkpoint`` may be a path or a loaded :class:`Checkpoint`.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else read_checkpoint(checkpoint)
    net = load_segnet(ckpt, expected)
    records = evaluate_volumes(net, samples)
    agg = {"volume_id": "aggregate", "count": len(records), **aggregate(records)}
    return records, agg
