//! Airfoil contours: UIUC Selig-format parsing, shear augmentation and
//! rasterization onto the Cartesian inference grid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, thiserror::Error)]
pub enum GeomError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("airfoil needs at least 3 distinct points, found {0}")]
    TooFewPoints(usize),
    #[error("airfoil contour intersects itself")]
    SelfIntersecting,
    #[error("shear angle {0}° outside ±45°")]
    ShearOutOfRange(f64),
    #[error("no cell center falls inside the shape")]
    EmptyMask,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::sync::Arc<std::io::Error>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// A closed airfoil contour in chord-normalized coordinates.
///
/// Points follow the file order (Selig: trailing edge, upper surface,
/// leading edge, lower surface); the closing edge runs from the last point
/// back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct AirfoilShape {
    pub name: String,
    pub points: Vec<Point>,
}

impl AirfoilShape {
    /// Validates the point count and simplicity of the closed polygon.
    pub fn new(name: impl Into<String>, points: Vec<Point>) -> Result<Self, GeomError> {
        let points = collapse_duplicates(points);
        if points.len() < 3 {
            return Err(GeomError::TooFewPoints(points.len()));
        }
        if self_intersects(&points) {
            return Err(GeomError::SelfIntersecting);
        }
        Ok(AirfoilShape { name: name.into(), points })
    }

    /// Selig-format text: name line followed by one `x y` pair per line.
    pub fn to_selig(&self) -> String {
        let mut s = format!("{}\n", self.name);
        for p in &self.points {
            let _ = writeln!(s, "{} {}", p.x, p.y);
        }
        s
    }

    /// Signed polygon area, positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                a.x * b.y - b.x * a.y
            })
            .sum::<f64>()
            / 2.0
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(x0, x1, y0, y1), p| (x0.min(p.x), x1.max(p.x), y0.min(p.y), y1.max(p.y)),
        )
    }

    /// Even-odd containment test for a single point.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.points.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[(i + 1) % n]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if x > p.x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn collapse_duplicates(points: Vec<Point>) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    out
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// True when two non-adjacent edges of the closed polygon meet.
pub fn self_intersects(points: &[Point]) -> bool {
    let n = points.len();
    if n < 4 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue; // shares the closing vertex
            }
            let (c, d) = (points[j], points[(j + 1) % n]);
            if segments_touch(a, b, c, d) {
                return true;
            }
        }
    }
    false
}

/// Parses a UIUC Selig-format coordinate file.
///
/// Lednicer files (whose first data line holds the per-surface point
/// counts) are rejected as malformed.
pub fn parse_uiuc(bytes: &[u8]) -> Result<AirfoilShape, GeomError> {
    let text = String::from_utf8_lossy(bytes);
    let mut lines = text.lines().enumerate();
    let name = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim().to_string(),
            None => return Err(GeomError::TooFewPoints(0)),
        }
    };
    let mut points = Vec::new();
    for (idx, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(GeomError::MalformedLine {
                line: line_no,
                reason: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| GeomError::MalformedLine {
                line: line_no,
                reason: format!("not a number: {s:?}"),
            })
        };
        let (x, y) = (parse(cols[0])?, parse(cols[1])?);
        if points.is_empty() && x > 1.5 && y > 1.5 {
            return Err(GeomError::MalformedLine {
                line: line_no,
                reason: "point-count header (Lednicer format) is not supported".into(),
            });
        }
        points.push(Point::new(x, y));
    }
    AirfoilShape::new(name, points)
}

/// Shears about the chord line: `(x, y) → (x + tan(angle)·y, y)`.
pub fn shear(shape: &AirfoilShape, angle_deg: f64) -> Result<AirfoilShape, GeomError> {
    if !(angle_deg.abs() <= 45.0) {
        return Err(GeomError::ShearOutOfRange(angle_deg));
    }
    let t = angle_deg.to_radians().tan();
    let points: Vec<Point> = shape.points.iter().map(|p| Point::new(p.x + t * p.y, p.y)).collect();
    if self_intersects(&points) {
        return Err(GeomError::SelfIntersecting);
    }
    Ok(AirfoilShape { name: shape.name.clone(), points })
}

/// Square sampling grid over an axis-aligned window, sampled at cell centers.
///
/// Row 0 is the top of the window (`y_max`), column 0 its left edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { resolution: 128, x_min: -0.5, x_max: 1.5, y_min: -1.0, y_max: 1.0 }
    }
}

impl GridSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        GridSpec { resolution, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.resolution == 0 {
            return Err(GeomError::InvalidGrid("resolution must be positive".into()));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(GeomError::InvalidGrid("window must have positive area".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        let n = self.resolution as f64;
        let dx = (self.x_max - self.x_min) / n;
        let dy = (self.y_max - self.y_min) / n;
        Point::new(self.x_min + (col as f64 + 0.5) * dx, self.y_max - (row as f64 + 0.5) * dy)
    }
}

/// Binary occupancy: 1 inside the airfoil, 0 in the flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub resolution: usize,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.resolution + col]
    }

    pub fn count_inside(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_inside(&self, cell: usize) -> bool {
        self.values[cell] == 1
    }

    /// Whether the interior cells form a single 8-connected component.
    ///
    /// Diagonal neighbours count: a thin cambered trailing edge rasterizes
    /// to a staircase of corner-touching cells.
    pub fn is_connected(&self) -> bool {
        let (_, sizes) = self.components();
        sizes.len() == 1
    }

    /// 8-connected labelling of interior cells: per-cell label (`usize::MAX`
    /// for flow cells) and the size of each component.
    fn components(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.resolution as isize;
        let mut label = vec![usize::MAX; self.values.len()];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.values.len() {
            if self.values[start] != 1 || label[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            label[start] = id;
            stack.push(start);
            let mut size = 0;
            while let Some(c) = stack.pop() {
                size += 1;
                let (r, q) = (c as isize / n, c as isize % n);
                for (dr, dq) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                    let (rr, qq) = (r + dr, q + dq);
                    if rr < 0 || qq < 0 || rr >= n || qq >= n {
                        continue;
                    }
                    let k = (rr * n + qq) as usize;
                    if self.values[k] == 1 && label[k] == usize::MAX {
                        label[k] = id;
                        stack.push(k);
                    }
                }
            }
            sizes.push(size);
        }
        (label, sizes)
    }

    /// Clears every interior cell outside the largest component.
    fn keep_largest_component(&mut self) {
        let (label, sizes) = self.components();
        let Some(best) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) else {
            return;
        };
        for (v, l) in self.values.iter_mut().zip(label) {
            if l != best {
                *v = 0;
            }
        }
    }
}

/// Marks every cell whose center lies inside the closed polygon (even-odd
/// rule), then drops islands disconnected from the largest component.
///
/// Islands appear where a trailing edge thinner than one cell crosses cell
/// rows; keeping only the main body makes the mask a single solid region.
///
/// Edges are half-open in `y`, so a scanline through a vertex counts it
/// once. A crossing exactly at a cell center counts as lying to its left,
/// which is the same as nudging the center by an infinitesimal `+x`.
pub fn rasterize(shape: &AirfoilShape, grid: &GridSpec) -> Result<Mask, GeomError> {
    let mut mask = scan_fill(shape, grid)?;
    if mask.count_inside() == 0 {
        return Err(GeomError::EmptyMask);
    }
    mask.keep_largest_component();
    Ok(mask)
}

fn scan_fill(shape: &AirfoilShape, grid: &GridSpec) -> Result<Mask, GeomError> {
    grid.validate()?;
    let n = grid.resolution;
    let pts = &shape.points;
    let mut values = vec![0u8; n * n];
    let mut crossings = Vec::new();
    for row in 0..n {
        let yc = grid.cell_center(row, 0).y;
        crossings.clear();
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            if (a.y > yc) != (b.y > yc) {
                crossings.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        // Number of crossings at or left of the current center.
        let mut left = 0;
        for col in 0..n {
            let xc = grid.cell_center(row, col).x;
            while left < crossings.len() && crossings[left] <= xc {
                left += 1;
            }
            if (crossings.len() - left) % 2 == 1 {
                values[row * n + col] = 1;
            }
        }
    }
    Ok(Mask { resolution: n, values })
}

/// Reads every `*.dat` file in `dir`, sorted by file name, keyed by file stem.
pub fn read_airfoil_dir(dir: &Path) -> Result<Vec<(String, AirfoilShape)>, GeomError> {
    let io = |e: std::io::Error| GeomError::Io { path: dir.to_path_buf(), source: e.into() };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("dat")))
        .collect();
    files.sort();
    let mut shapes = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| GeomError::Io { path: f.clone(), source: e.into() })?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match parse_uiuc(&bytes) {
            Ok(shape) => shapes.push((stem, shape)),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    Ok(shapes)
}

/// NACA four-digit section, e.g. `(2, 4, 12)` for NACA 2412, with
/// `per_side` cosine-spaced stations per surface, in Selig order.
pub fn naca4(max_camber: u32, camber_pos: u32, thickness: u32, per_side: usize) -> AirfoilShape {
    let m = max_camber as f64 / 100.0;
    let p = camber_pos as f64 / 10.0;
    let t = thickness as f64 / 100.0;
    let half_thickness =
        |x: f64| 5.0 * t * (0.2969 * x.sqrt() - 0.1260 * x - 0.3516 * x * x + 0.2843 * x.powi(3) - 0.1015 * x.powi(4));
    let camber = |x: f64| -> (f64, f64) {
        if m == 0.0 || p == 0.0 {
            (0.0, 0.0)
        } else if x < p {
            (m / (p * p) * (2.0 * p * x - x * x), 2.0 * m / (p * p) * (p - x))
        } else {
            (m / (1.0 - p).powi(2) * (1.0 - 2.0 * p + 2.0 * p * x - x * x), 2.0 * m / (1.0 - p).powi(2) * (p - x))
        }
    };
    let station = |i: usize| 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / per_side as f64).cos());
    let surface = |x: f64, sign: f64| {
        let (yc, slope) = camber(x);
        let th = slope.atan();
        let yt = half_thickness(x);
        Point::new(x - sign * yt * th.sin(), yc + sign * yt * th.cos())
    };
    let mut points = Vec::with_capacity(2 * per_side + 1);
    for i in (0..=per_side).rev() {
        points.push(surface(station(i), 1.0));
    }
    for i in 1..=per_side {
        points.push(surface(station(i), -1.0));
    }
    let name = format!("NACA {max_camber}{camber_pos}{thickness:02}");
    AirfoilShape::new(name, points).expect("NACA four-digit sections are simple polygons")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square() -> AirfoilShape {
        AirfoilShape::new(
            "unit",
            vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 1.0), Point::new(0.0, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn parses_diamond_and_collapses_closing_point() {
        let s = parse_uiuc(b"sq\n1 0\n0.5 0.5\n0 0\n0.5 -0.5\n1 0").unwrap();
        assert_eq!(s.name, "sq");
        assert_eq!(s.points.len(), 4);
        assert_eq!(s.points[1], Point::new(0.5, 0.5));
    }

    #[test]
    fn rejects_bad_lines() {
        let err = parse_uiuc(b"x\n1 0\n0.5 abc\n0 0\n").unwrap_err();
        assert!(matches!(err, GeomError::MalformedLine { line: 3, .. }), "{err:?}");
        let err = parse_uiuc(b"x\n1 0 3\n").unwrap_err();
        assert!(matches!(err, GeomError::MalformedLine { line: 2, .. }));
        let err = parse_uiuc(b"x\n1 0\n0 0\n").unwrap_err();
        assert!(matches!(err, GeomError::TooFewPoints(2)));
    }

    #[test]
    fn rejects_lednicer_header() {
        let err = parse_uiuc(b"NACA 0012\n  3.  3.\n\n0 0\n0.5 0.1\n1 0\n").unwrap_err();
        assert!(matches!(err, GeomError::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn rejects_bow_tie() {
        let err = parse_uiuc(b"bow\n0 0\n1 1\n1 0\n0 1\n").unwrap_err();
        assert!(matches!(err, GeomError::SelfIntersecting));
    }

    #[test]
    fn selig_file_stays_in_chord_range() {
        let text = naca4(2, 4, 12, 60).to_selig();
        let s = parse_uiuc(text.as_bytes()).unwrap();
        let (x0, x1, _, _) = s.bounds();
        let col_min = text.lines().skip(1).map(|l| l.split_whitespace().next().unwrap().parse::<f64>().unwrap());
        let file_min = col_min.clone().fold(f64::INFINITY, f64::min);
        let file_max = col_min.fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((x0, x1), (file_min, file_max));
        assert!(x0 >= -0.01 && x1 <= 1.01);
    }

    #[test]
    fn shear_cases() {
        let s = AirfoilShape::new(
            "tri",
            vec![Point::new(0.5, 0.0), Point::new(0.3, 0.1), Point::new(0.0, 0.0), Point::new(0.3, -0.1)],
        )
        .unwrap();
        assert_eq!(shear(&s, 0.0).unwrap(), s);
        let sh = shear(&s, 15.0).unwrap();
        assert_eq!(sh.points[0], Point::new(0.5, 0.0));
        assert!((sh.points[1].x - 0.326_794_919).abs() < 1e-8);
        assert_eq!(sh.points[1].y, 0.1);
        assert!(matches!(shear(&s, 50.0), Err(GeomError::ShearOutOfRange(_))));
    }

    #[test]
    fn unit_square_center_cell() {
        let grid = GridSpec { resolution: 3, x_min: -1.0, x_max: 2.0, y_min: -1.0, y_max: 2.0 };
        let mask = rasterize(&square(), &grid).unwrap();
        assert_eq!(mask.values, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn shape_outside_window_is_empty() {
        let grid = GridSpec { resolution: 8, x_min: 5.0, x_max: 6.0, y_min: 5.0, y_max: 6.0 };
        assert!(matches!(rasterize(&square(), &grid), Err(GeomError::EmptyMask)));
    }

    #[test]
    fn naca_mask_is_one_component() {
        for (m, p, t) in [(0, 0, 12), (2, 4, 12), (6, 4, 6), (4, 5, 21)] {
            let mask = rasterize(&naca4(m, p, t, 60), &GridSpec::default()).unwrap();
            assert!(mask.is_connected(), "naca {m}{p}{t}");
            assert!(mask.count_inside() > 50);
            assert!(mask.count_inside() < mask.values.len());
        }
    }

    #[test]
    fn naca_orientation_is_counter_clockwise() {
        assert!(naca4(2, 4, 12, 40).signed_area() > 0.0);
    }

    fn star(radii: &[f64], scale: f64, cx: f64, cy: f64) -> AirfoilShape {
        let n = radii.len();
        let pts = radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                Point::new(cx + scale * r * a.cos(), cy + scale * r * a.sin())
            })
            .collect();
        AirfoilShape::new("star", pts).unwrap()
    }

    proptest! {
        #[test]
        fn shear_round_trips(angle in -45.0f64..45.0, m in 0u32..7, t in 6u32..22) {
            let s = naca4(m, 4, t, 30);
            if let Ok(fwd) = shear(&s, angle) {
                let back = shear(&fwd, -angle).unwrap();
                for (a, b) in back.points.iter().zip(&s.points) {
                    prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn selig_text_round_trips(m in 0u32..7, p in 2u32..7, t in 6u32..22, n in 10usize..80) {
            let s = naca4(m, p, t, n);
            let again = parse_uiuc(s.to_selig().as_bytes()).unwrap();
            prop_assert_eq!(&again, &s);
        }

        #[test]
        fn raster_is_monotone_under_containment(
            radii in proptest::collection::vec(0.3f64..0.9, 5..24),
            shrink in 0.1f64..1.0,
            cx in 0.2f64..0.8,
            cy in -0.3f64..0.3,
        ) {
            let grid = GridSpec::with_resolution(48);
            let outer = star(&radii, 1.0, cx, cy);
            let inner = star(&radii, shrink, cx, cy);
            let big = scan_fill(&outer, &grid).unwrap();
            let small = scan_fill(&inner, &grid).unwrap();
            {
                for (s, b) in small.values.iter().zip(&big.values) {
                    prop_assert!(s <= b);
                }
            }
        }
    }
}
