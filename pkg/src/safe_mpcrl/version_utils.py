"""A helper module for recording the versions of the packages an experiment ran with."""

from importlib import metadata
import sys

CORE_DISTRIBUTIONS = ("safe-mpcrl", "casadi", "gymnasium", "numpy", "pydantic", "pyyaml", "scipy")


def get_loaded_packages(skip_common=True):
    """Return the top-level names of the loaded modules.

    Parameters
    ----------
    skip_common : bool
        Whether to skip the common modules, such as the built-in ones.

    Returns
    -------
    packages : list of str
        The sorted top-level module names.
    """
    packages = set()
    for name, module in list(sys.modules.items()):
        top = name.split(".")[0]
        skip = top == "__main__" or top.startswith("_")
        if hasattr(module, "__spec__") and module.__spec__ is not None:
            # Skip the built-in modules or ones from the python framework.
            origin = module.__spec__.origin
            if origin in ("built-in", "frozen"):
                skip = True
            elif origin is not None and "Python.framework" in origin:
                skip = True
        if top in sys.stdlib_module_names:
            skip = True

        if not skip_common or not skip:
            packages.add(top)
    return sorted(packages)


def distribution_version(name):
    """Return the installed version of a distribution, or None if it is not installed."""
    try:
        return metadata.version(name)
    except metadata.PackageNotFoundError:
        return None


def package_versions(distributions=CORE_DISTRIBUTIONS, include_loaded=False):
    """Return a mapping of distribution name to installed version.

    Parameters
    ----------
    distributions : iterable of str
        The distributions to always report (missing ones map to None).
    include_loaded : bool
        Whether to also report the distributions behind every loaded third-party module.

    Returns
    -------
    versions : dict
        Distribution name to version string, sorted by name.
    """
    versions = {name: distribution_version(name) for name in distributions}
    if include_loaded:
        owners = metadata.packages_distributions()
        for top in get_loaded_packages(skip_common=True):
            for dist in owners.get(top, []):
                if dist not in versions:
                    versions[dist] = distribution_version(dist)
    versions["python"] = sys.version.split()[0]
    return dict(sorted(versions.items()))
