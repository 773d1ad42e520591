from scenetree.metrics.distances import chamfer, emd, emd_is_exact, pairwise_distances
from scenetree.metrics.point_cloud import PointCloud, augment_points, load_point_cloud, sample_points
from scenetree.metrics.set_metrics import MetricReport, metrics_from_matrices, retrieve_nearest, set_metrics
