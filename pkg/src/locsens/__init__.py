"""Location-sensitive image retrieval and tagging.

Learns plausibility scores for (image embedding, hashtag, geo-coordinate)
triplets and uses them to retrieve images for tag+location queries and to
tag images given their location; ships the location-agnostic baseline
learners, the training schedules that balance the location modality, and the
full evaluation protocol.
"""

__version__ = "0.1.0"

from .geo import GeoCoord, GranularityLevel, NormCoord

__all__ = ["GeoCoord", "GranularityLevel", "NormCoord", "__version__"]
