"""
Buffer and city means over a tiled raster
=========================================

Two tiles form one virtual mosaic.  A small buffer around a sensor and a
city polygon are averaged over the same cells whether or not a tile seam
runs through them.
"""

import numpy as np

from pmexposure.geodata import GeoPoint, Polygon, RasterGrid, VirtualMosaic
from pmexposure.geodata import extract_buffer_mean, extract_polygon_mean, sample_at

# an AOD-like field on a 0.01 degree lattice, with one missing cell
rng = np.random.default_rng(0)
values = np.round(0.3 + 0.05 * rng.standard_normal((40, 60)), 4)
values[12, 30] = -9999
whole = RasterGrid(values, 105.0, 20.0, 0.01)

# the same field cut into a west and an east tile
west = RasterGrid(values[:, :30], 105.0, 20.0, 0.01)
east = RasterGrid(values[:, 30:], 105.3, 20.0, 0.01)
mosaic = VirtualMosaic((west, east), variable="aod", week="2020-03-16")

# a sensor sitting exactly on the seam: the point lookup takes the western cell
seam = GeoPoint(20.205, 105.30)
print("value at seam      ", sample_at(mosaic, seam))

# a 75 m buffer touches cells on both sides and ignores the missing one
for radius in (75, 500, 2000):
    a = extract_buffer_mean(mosaic, seam, radius)
    b = extract_buffer_mean(VirtualMosaic.from_grid(whole), seam, radius)
    print(f"buffer {radius:5d} m      tiled {a:.6f}   single tile {b:.6f}")

# city means count every cell whose centre falls inside the polygon
city = Polygon(np.array([[105.1, 20.1], [105.45, 20.05], [105.5, 20.3], [105.2, 20.35], [105.1, 20.1]]))
print("city mean          ", round(extract_polygon_mean(mosaic, city), 6))
