import math


class Vector:
    __slots__ = ("x", "y")

    def __init__(self, x=0.0, y=0.0):
        self.x = x
        self.y = y

    def __add__(self, other):
        return Vector(self.x + other.x, self.y + other.y)

    def __sub__(self, other):
        return Vector(self.x - other.x, self.y - other.y)

    def __mul__(self, k):
        return Vector(self.x * k, self.y * k)

    def dot(self, other):
        return self.x * other.x + self.y * other.y

    def norm(self):
        return math.sqrt(self.dot(self))

    def normalized(self):
        length = self.norm()
        if length == 0:
            raise ZeroDivisionError("cannot normalize a zero vector")
        return Vector(self.x / length, self.y / length)

    def __repr__(self):
        return "Vector(%r, %r)" % (self.x, self.y)


def polygon_area(points):
    area = 0.0
    for i in range(len(points)):
        j = (i + 1) % len(points)
        area += points[i].x * points[j].y - points[j].x * points[i].y
    return abs(area) / 2.0


def centroid(points):
    if not points:
        return None
    sx = sum(p.x for p in points)
    sy = sum(p.y for p in points)
    return Vector(sx / len(points), sy / len(points))


def bounding_box(points):
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    return (min(xs), min(ys), max(xs), max(ys))


def rotate(point, angle, origin=None):
    origin = origin or Vector()
    s, c = math.sin(angle), math.cos(angle)
    dx, dy = point.x - origin.x, point.y - origin.y
    return Vector(origin.x + dx * c - dy * s, origin.y + dx * s + dy * c)


def is_convex(points):
    signs = set()
    for i in range(len(points)):
        a, b, c = points[i], points[(i + 1) % len(points)], points[(i + 2) % len(points)]
        cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x)
        if cross != 0:
            signs.add(cross > 0)
    return len(signs) <= 1
