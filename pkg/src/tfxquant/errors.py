"""Exception types shared across the package.

The CLI maps these onto machine-readable error objects, so the class names
are part of the tool's output contract.
"""


class TfxQuantError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(TfxQuantError):
    pass


class EmptyModel(TfxQuantError):
    pass


class UnknownLayerKind(TfxQuantError):
    pass


class ChecksumError(TfxQuantError):
    pass


class UnsupportedWidth(TfxQuantError):
    pass


class TileOverflow(TfxQuantError):
    pass


class EmptyDataset(TfxQuantError):
    pass


class LabelMismatch(TfxQuantError):
    pass


class FoldError(TfxQuantError):
    pass
