import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from modmerge.tensors import ComponentId, ComponentKind, ModelBundle, ModelComponents


def small_bundle(num_tasks=3, seed=7, include_head=False, delta_scale=0.05):
    """Toy bundle with fine-tune-style task models (pretrained + small deltas)."""
    rng = np.random.default_rng(seed)
    ids = [
        ComponentId(0, ComponentKind.ATTENTION),
        ComponentId(0, ComponentKind.MLP),
        ComponentId(0, ComponentKind.NORM),
    ]
    shapes = {ids[0]: (4, 5), ids[1]: (3, 6), ids[2]: (2, 5)}
    if include_head:
        head = ComponentId(1, ComponentKind.HEAD)
        ids.append(head)
        shapes[head] = (5, 3)
    pre = ModelComponents(
        {cid: rng.normal(0, 0.5, shapes[cid]).astype(np.float32) for cid in ids}
    )
    tasks = []
    for _ in range(num_tasks):
        tasks.append(
            ModelComponents(
                {
                    cid: (pre[cid] + rng.normal(0, delta_scale, shapes[cid]).astype(np.float32))
                    for cid in ids
                }
            )
        )
    return ModelBundle(
        pretrained=pre,
        task_models=tuple(tasks),
        task_names=tuple(f"task{i}" for i in range(num_tasks)),
    )


@pytest.fixture
def bundle3():
    return small_bundle(num_tasks=3)
