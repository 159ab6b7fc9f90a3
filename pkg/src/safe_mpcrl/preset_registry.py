"""A registry of named experiment presets."""

import copy


class UnknownPresetError(KeyError):
    """Raised when a preset name is not in the registry."""


def deep_merge(base, override):
    """Recursively merge ``override`` onto a copy of ``base``.

    Nested dictionaries are merged key by key; every other value in ``override`` replaces
    the one in ``base``.

    Parameters
    ----------
    base : dict
        The defaults.
    override : dict
        The values taking precedence.

    Returns
    -------
    dict
        The merged dictionary (inputs are not modified).

    Examples
    --------
    >>> deep_merge({"a": {"x": 1, "y": 2}, "b": 1}, {"a": {"y": 3}})
    {'a': {'x': 1, 'y': 3}, 'b': 1}
    """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class PresetEntry:
    """A named set of configuration values.

    Attributes
    ----------
    name : str
        The preset name, e.g. ``"static-lod"``.
    values : dict
        The nested configuration values.
    description : str
        A one-line summary.
    """

    def __init__(self, name, values, description=""):
        if len(name) == 0:
            raise ValueError("A preset needs a non-empty name.")
        self.name = name
        self.values = copy.deepcopy(values)
        self.description = description

    def __str__(self):
        return f"{self.name}: {self.description}"

    def extend(self, other_entry):
        """Merge another entry with the same name onto this one.

        Parameters
        ----------
        other_entry : PresetEntry
            The entry whose values take precedence.
        """
        if other_entry is None or other_entry.name != self.name:
            raise ValueError("Can only extend a PresetEntry with another entry with the same name.")
        self.values = deep_merge(self.values, other_entry.values)
        if len(other_entry.description) > 0:
            self.description = other_entry.description


class PresetRegistry:
    """Stores the experiment presets by name.

    Attributes
    ----------
    all_entries : dict
        A dictionary mapping a preset's name to its PresetEntry object.
    """

    def __init__(self):
        self.all_entries = {}

    def __len__(self):
        return len(self.all_entries)

    def __contains__(self, name):
        return name in self.all_entries

    def __getitem__(self, name):
        if name not in self.all_entries:
            known = ", ".join(sorted(self.all_entries))
            raise UnknownPresetError(f"Unknown preset {name!r}; known presets: {known}.")
        return self.all_entries[name]

    def add(self, entry):
        """Add a preset to the registry.

        If the name is already registered, the new values are merged onto the existing entry.

        Parameters
        ----------
        entry : PresetEntry
            The preset to add.
        """
        if entry.name not in self.all_entries:
            self.all_entries[entry.name] = entry
        else:
            self.all_entries[entry.name].extend(entry)

    def names(self):
        """Return the registered preset names in sorted order."""
        return sorted(self.all_entries)

    def get_values(self, name):
        """Return a copy of a preset's values.

        Parameters
        ----------
        name : str
            The preset name.

        Returns
        -------
        dict
            The nested configuration values.
        """
        return copy.deepcopy(self[name].values)


_STATIC_WORLD = {
    "obstacles": [{"center": [2.0, 2.25], "radius": 1.5}],
}

_DYNAMIC_WORLD = {
    "obstacles": [
        {"center": [-2.0, 0.0], "radius": 1.0},
        {
            "center": [-4.0, -1.5],
            "radius": 0.7,
            "motion": {"x_min": -4.0, "x_max": 0.0, "speed": 0.2, "direction": 1},
        },
        {
            "center": [-4.0, -3.3],
            "radius": 0.7,
            "motion": {"x_min": -4.0, "x_max": 1.0, "speed": 0.2, "direction": 1},
        },
    ],
}


def _static_preset(variant, learning_rate):
    return {
        "variant": variant,
        "world": _STATIC_WORLD,
        "mpc": {"horizon": 1, "w_mpc": 20.0**6},
        "trainer": {"w_rl": 1e3, "episode_length": 60, "learning_rate": learning_rate},
    }


def _dynamic_preset(variant):
    return {
        "variant": variant,
        "world": _DYNAMIC_WORLD,
        "mpc": {"horizon": 6, "w_mpc": 20.0**7},
        "network": {"hidden": [16, 16, 16]},
        "trainer": {"w_rl": 1e5, "episode_length": 80, "learning_rate": 1e-3},
    }


# ----------------------------------------------------------------------------
# The GLOBAL preset registry -------------------------------------------------
# ----------------------------------------------------------------------------

SAFE_MPCRL_PRESETS = PresetRegistry()
SAFE_MPCRL_PRESETS.add(
    PresetEntry("static-lod", _static_preset("lod", 5e-3), "One static obstacle, optimal-decay CBF, N=1")
)
SAFE_MPCRL_PRESETS.add(
    PresetEntry(
        "static-nn", _static_preset("nn", 1e-3), "One static obstacle, feedforward decay network, N=1"
    )
)
SAFE_MPCRL_PRESETS.add(
    PresetEntry(
        "dynamic-nn", _dynamic_preset("nn"), "One static and two moving obstacles, feedforward network, N=6"
    )
)
SAFE_MPCRL_PRESETS.add(
    PresetEntry(
        "dynamic-rnn", _dynamic_preset("rnn"), "One static and two moving obstacles, Elman network, N=6"
    )
)
