import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from clickchoice.errors import InputError
from clickchoice.tables import CountTensor, LatentClassModel

logger = logging.getLogger(__name__)

RECENCY_SLICE_OFFSET = 6


@dataclass(frozen=True)
class ClassProfile:
    index: int
    pi: float
    categories: Tuple[str, ...]
    samples: int
    purchase_rate: float
    # probability along recency at the given frequency levels, and along frequency at the given recency levels
    recency_slices: Dict[int, List[float]]
    frequency_slices: Dict[int, List[float]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "pi": self.pi,
            "categories": list(self.categories),
            "samples": self.samples,
            "purchase_rate": self.purchase_rate,
            "recency_slices": {str(j): values for j, values in self.recency_slices.items()},
            "frequency_slices": {str(i): values for i, values in self.frequency_slices.items()},
        }


def report_class_profiles(model: LatentClassModel, tensor: CountTensor) -> List[ClassProfile]:
    """Class sizes, member categories, purchase rates and table slices for every latent class."""
    if model.grid != tensor.grid:
        raise InputError(f"Model grid {model.grid.describe()} does not match tensor grid {tensor.grid.describe()}")
    if tuple(model.categories) != tuple(tensor.categories):
        raise InputError("Model and tensor were built over different categories")

    I, J = model.grid.shape
    frequency_levels = sorted({1, J})
    recency_levels = sorted({max(I - RECENCY_SLICE_OFFSET, 1), I})
    samples = tensor.samples_per_category()
    purchases = tensor.q.sum(axis=(0, 1))
    assigned = model.hard_assignments()

    profiles = []
    for s, table in enumerate(model.tables):
        members = np.flatnonzero(assigned == s)
        members = sorted(members, key=lambda k: (-int(samples[k]), model.categories[k]))
        viewed = int(samples[members].sum()) if members else 0
        bought = int(purchases[members].sum()) if members else 0
        profiles.append(
            ClassProfile(
                index=s + 1,
                pi=float(model.pi[s]),
                categories=tuple(model.categories[k] for k in members),
                samples=viewed,
                purchase_rate=bought / viewed if viewed else 0.0,
                recency_slices={j: table.values[:, j - 1].tolist() for j in frequency_levels},
                frequency_slices={i: table.values[i - 1, :].tolist() for i in recency_levels},
            )
        )
        logger.info(
            f"Class {s + 1}: pi {model.pi[s]:.3f}, {len(members)} categories, "
            f"{viewed} samples, purchase rate {profiles[-1].purchase_rate:.4f}"
        )
    return profiles
