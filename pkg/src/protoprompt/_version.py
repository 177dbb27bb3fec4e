from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version("protoprompt")
except PackageNotFoundError:
    # package not installed
    __version__ = "0.0.0"
__version_tuple__ = tuple(int(p) for p in __version__.split(".")[:3] if p.isdigit())
