# models/class_map.py
from dataclasses import dataclass

from backend.app.ml.pseudo_label import IGNORE
from backend.app.utils.error_handlers import AnnotationError, ConfigError
from backend.app.utils import storage

IGNORE_NAME = "unlabeled"

ROAD_SCENE_CLASSES = (
    'road', 'sidewalk', 'building', 'wall', 'fence', 'pole', 'traffic light',
    'traffic sign', 'vegetation', 'terrain', 'sky', 'person', 'rider', 'car',
    'truck', 'bus', 'train', 'motorcycle', 'bicycle',
)

# Subsets shared with synthetic road-scene sources: 16 classes drop terrain,
# truck and train; 13 classes additionally drop wall, fence and pole.
SUBSETS = {
    19: tuple(range(19)),
    16: (0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 15, 17, 18),
    13: (0, 1, 2, 6, 7, 8, 10, 11, 12, 13, 15, 17, 18),
}


@dataclass(frozen=True)
class ClassMap:
    """Ordered class names; position is the class index."""
    names: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if not names:
            raise AnnotationError("class map needs at least one class")
        if len(set(names)) != len(names):
            raise AnnotationError("class names must be unique")
        if IGNORE_NAME in names:
            raise AnnotationError(f"'{IGNORE_NAME}' is reserved for the ignore index")
        if len(names) >= IGNORE:
            raise AnnotationError(f"at most {IGNORE - 1} classes are supported")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)

    def index_of(self, name):
        """Class index for a label name; 'unlabeled' maps to IGNORE."""
        if name == IGNORE_NAME:
            return IGNORE
        try:
            return self.names.index(name)
        except ValueError:
            raise AnnotationError(f"unknown label '{name}'") from None

    def name_of(self, index):
        if index == IGNORE:
            return IGNORE_NAME
        if not 0 <= index < len(self.names):
            raise AnnotationError(f"class index {index} not in class map")
        return self.names[index]

    def items(self):
        return list(enumerate(self.names))

    def to_dict(self):
        return {
            "classes": [{"name": name, "index": index} for index, name in self.items()],
            "ignore": {"name": IGNORE_NAME, "index": IGNORE},
        }

    @classmethod
    def from_dict(cls, data):
        entries = data.get("classes") if isinstance(data, dict) else data
        if not isinstance(entries, list):
            raise AnnotationError("class map must list its classes")
        names = []
        for position, entry in enumerate(entries):
            if isinstance(entry, dict):
                if int(entry.get("index", position)) != position:
                    raise AnnotationError("class indices must be contiguous from 0 and in order")
                names.append(entry["name"])
            else:
                names.append(entry)
        return cls(tuple(names))

    @classmethod
    def road_scene(cls):
        return cls(ROAD_SCENE_CLASSES)

    @classmethod
    def generic(cls, classes):
        return cls(tuple(f"class_{i}" for i in range(classes)))

    def save(self, path, force=True):
        return storage.write_yaml(path, self.to_dict(), force=force)

    @classmethod
    def load(cls, path):
        return cls.from_dict(storage.read_yaml(path))


def resolve_subset(value, classes):
    """Turn '19' / '16' / '13' / '0,3,5' into class indices."""
    if value is None:
        return None
    text = str(value).strip()
    if "," not in text and text.isdigit() and int(text) in SUBSETS and int(text) != classes:
        subset = SUBSETS[int(text)]
        if max(subset) >= classes:
            raise ConfigError(f"subset {text} needs the 19-class map, model has {classes}")
        return list(subset)
    if "," not in text and text.isdigit() and int(text) == classes:
        return list(range(classes))
    try:
        subset = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse class subset '{text}'") from None
    if any(not 0 <= c < classes for c in subset):
        raise ConfigError(f"class subset '{text}' has indices outside [0, {classes})")
    return subset
