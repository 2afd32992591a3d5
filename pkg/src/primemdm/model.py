"""Network config + codec + filter tables, validated together."""
from __future__ import annotations

from .codec import SubTokenCodec
from .decoder import FilterTable, build_filter_table
from . import net as netmod


class Model:
    """Bundles the pieces needed to evaluate p_theta(y0^i | y_t)."""

    def __init__(self, config: netmod.NetConfig, codec: SubTokenCodec):
        if config.num_classes != codec.num_classes or config.length != codec.length \
                or config.base != codec.base:
            raise ValueError("network config does not match codec")
        self.config = config
        self.codec = codec
        self.filters: FilterTable = build_filter_table(codec)

    @property
    def mask_value(self) -> int:
        return self.codec.mask_value
