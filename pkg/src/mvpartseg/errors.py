"""Exception types, grouped by how the CLI maps them to exit codes."""


class PartSegError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PartSegError):
    """Invalid configuration value or config file (CLI exit code 2)."""


class InputFormatError(PartSegError):
    """Malformed or inconsistent input file (CLI exit code 3)."""


# --- input format errors -------------------------------------------------

class MalformedHeader(InputFormatError):
    """PLY header is structurally invalid or missing required properties."""


class UnsupportedProperty(InputFormatError):
    """PLY property type this reader cannot decode (e.g. list in vertex)."""


class SchemaError(InputFormatError):
    """JSON document does not match the expected schema."""


class NonOrthonormalRotation(InputFormatError):
    """Rotation matrix fails orthonormality or has negative determinant."""


class UnknownClass(InputFormatError):
    """Mask region names a class absent from the catalog."""


class RegionWithoutPixels(InputFormatError):
    """Mask JSON declares a region that has no pixels in the label image."""


class PixelsWithoutRegion(InputFormatError):
    """Label image contains a region id absent from the mask JSON."""


class ResolutionMismatch(InputFormatError):
    """Label image size differs from the camera view it is paired with."""


class SizeMismatch(InputFormatError):
    """Two per-point structures cover different point counts."""


# --- domain / contract errors (CLI exit code 4 if they escape) -----------

class AllZeroWeights(PartSegError):
    """Every weight is zero; the distribution update is degenerate."""


class NonPositiveInput(PartSegError):
    """An argument that must be strictly positive is not."""


class TooFewPoints(PartSegError):
    """Operation needs more points than the cloud provides."""


class EmptyInstance(PartSegError):
    """Operation requires a non-empty point cloud."""


class NonPositiveDepth(PartSegError):
    """Back-projection depth must be strictly positive."""


class SingleClassCatalog(PartSegError):
    """Observation spreading is undefined for a one-class catalog."""


class UnknownRegion(PartSegError):
    """Region id not present in the mask set."""


class PlacementFailure(PartSegError):
    """Synthetic object placement failed after bounded retries."""
