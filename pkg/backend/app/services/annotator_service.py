# services/annotator_service.py (expert-correction providers)
import logging
import os
import time
from abc import ABC, abstractmethod

from backend.app.ml.pseudo_label import LabelMask
from backend.app.services.annotation_service import (
    labelme_path,
    read_labelme,
    save_labelme,
    write_labelme,
)
from backend.app.utils.error_handlers import AnnotationError, MissingGroundTruthError, StorageError

logger = logging.getLogger(__name__)


class AnnotationProvider(ABC):
    """Returns a corrected LabelMask for an image id."""

    @abstractmethod
    def annotate(self, image_id, prediction=None):
        """
        Args:
            image_id (str): image to label
            prediction (LabelMask): model prediction offered to the expert

        Returns:
            LabelMask: corrected labels
        """


class SimulatedAnnotator(AnnotationProvider):
    """Oracle expert: answers with the stored ground truth."""

    def __init__(self, ground_truth):
        # ground_truth: mapping image id -> LabelMask or PGM path
        self.ground_truth = ground_truth

    def annotate(self, image_id, prediction=None):
        return simulated_annotator(image_id, self.ground_truth)


def simulated_annotator(image_id, ground_truth):
    """Ground-truth mask for `image_id` from a store of masks or mask paths."""
    if image_id not in ground_truth:
        raise MissingGroundTruthError(image_id)
    stored = ground_truth[image_id]
    if stored is None:
        raise MissingGroundTruthError(image_id)
    if isinstance(stored, LabelMask):
        return stored
    try:
        return LabelMask.load(stored)
    except StorageError as e:
        raise MissingGroundTruthError(image_id) from e


class LabelmeFileAnnotator(AnnotationProvider):
    """
    Real workflow: export the prediction for editing, then block until the
    corrected Labelme file with the same name appears in the inbox directory.
    """

    def __init__(self, class_map, export_dir, inbox_dir=None, poll_interval=2.0, timeout=None):
        self.class_map = class_map
        self.export_dir = export_dir
        self.inbox_dir = inbox_dir or os.path.join(export_dir, "corrected")
        self.poll_interval = poll_interval
        self.timeout = timeout

    def export(self, image_id, prediction):
        document = write_labelme(prediction, self.class_map, image_path=f"{image_id}.png")
        return save_labelme(labelme_path(self.export_dir, image_id), document)

    def annotate(self, image_id, prediction=None):
        height = width = None
        if prediction is not None:
            self.export(image_id, prediction)
            height, width = prediction.shape
        corrected = labelme_path(self.inbox_dir, image_id)
        waited = 0.0
        logger.info(f"Waiting for corrected annotation {corrected}")
        while not os.path.exists(corrected):
            if self.timeout is not None and waited >= self.timeout:
                raise AnnotationError(f"no corrected annotation for '{image_id}' after {waited:.0f}s")
            time.sleep(self.poll_interval)
            waited += self.poll_interval
        return read_labelme(corrected, self.class_map, height, width)
