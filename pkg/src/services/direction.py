import logging

import numpy as np

from src.config import get_settings
from src.models.data import Dataset, DirectionVector, NormalizedDataset
from src.models.schemas import Technology
from src.services.dataset import normalize

settings = get_settings()
logger = logging.getLogger(__name__)

def _clamp(values: np.ndarray) -> np.ndarray:
    return np.clip(values, settings.DIRECTION_FLOOR, 1.0)

def select_direction(nd: NormalizedDataset, tech: Technology) -> DirectionVector:
    """Median rule on normalized data; weak G-disposability keeps its fixed slack direction"""
    if tech == Technology.WGD:
        return DirectionVector.fixed_slack(nd.x_p.shape[1], nd.y.shape[1], nd.b.shape[1])
    if nd.n_dmu < 2:
        raise ValueError("direction selection needs at least two DMUs")

    # np.median averages the two central order statistics for even I
    g_y = _clamp(1.0 - np.median(nd.y, axis=0))
    g_b = _clamp(np.median(nd.b, axis=0))
    g_x = _clamp(1.0 - np.median(nd.x_p, axis=0))

    g = DirectionVector(g_x=g_x, g_y=g_y, g_b=g_b)
    logger.info(f"Selected {tech.value} direction g_x={g_x.round(4).tolist()} g_b={g_b.round(4).tolist()} g_y={g_y.round(4).tolist()}")
    return g

def direction_for(d: Dataset, tech: Technology) -> DirectionVector:
    if tech == Technology.WGD:
        dims = d.dims
        return DirectionVector.fixed_slack(dims["M2"], dims["J"], dims["K"])
    return select_direction(normalize(d), tech)
