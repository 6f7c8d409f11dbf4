use crate::grid::{Grid, LabelMap};

/// Marks every pixel that has a 4-neighbour (inside the map) with a different class.
pub fn extract_boundary(labels: &LabelMap) -> Grid<u8> {
    let (h, w) = labels.dims();
    Grid::from_fn(h, w, |y, x| {
        let c = labels.get(y, x);
        let differs = (y > 0 && labels.get(y - 1, x) != c)
            || (y + 1 < h && labels.get(y + 1, x) != c)
            || (x > 0 && labels.get(y, x - 1) != c)
            || (x + 1 < w && labels.get(y, x + 1) != c);
        differs as u8
    })
}
