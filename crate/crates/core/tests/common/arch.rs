//! Layer tables of the generator and critics written out by hand, as the
//! shape oracle for the builders.

#![allow(dead_code)]

/// `(layer, kernel, stride, in_channels, out_channels, out_side, skip, dsa)`.
pub type Row = (
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    Option<usize>,
    bool,
);

pub fn res256_generator() -> Vec<Row> {
    vec![
        (1, 7, 2, 4, 64, 128, None, false),
        (2, 5, 2, 64, 128, 64, None, false),
        (3, 3, 2, 128, 256, 32, None, false),
        (4, 3, 2, 256, 512, 16, None, false),
        (5, 3, 2, 512, 512, 8, None, false),
        (6, 3, 2, 512, 512, 4, None, false),
        (7, 3, 2, 512, 512, 2, None, false),
        (8, 3, 2, 512, 512, 1, None, false),
        (9, 3, 1, 512 + 512, 512, 2, Some(7), false),
        (10, 3, 1, 512 + 512, 512, 4, Some(6), false),
        (11, 3, 1, 512 + 512, 512, 8, Some(5), false),
        (12, 3, 1, 512 + 512, 512, 16, Some(4), true),
        (13, 3, 1, 512 + 256, 256, 32, Some(3), true),
        (14, 3, 1, 256 + 128, 128, 64, Some(2), true),
        (15, 3, 1, 128 + 64, 64, 128, Some(1), false),
        (16, 3, 1, 64 + 4, 3, 256, Some(0), false),
    ]
}

pub fn res1024_generator() -> Vec<Row> {
    vec![
        (1, 7, 2, 4, 64, 512, None, false),
        (2, 5, 2, 64, 128, 256, None, false),
        (3, 3, 2, 128, 256, 128, None, false),
        (4, 3, 2, 256, 512, 64, None, false),
        (5, 3, 2, 512, 512, 32, None, false),
        (6, 3, 2, 512, 512, 16, None, false),
        (7, 3, 2, 512, 512, 8, None, false),
        (8, 3, 2, 512, 512, 4, None, false),
        (9, 3, 2, 512, 512, 2, None, false),
        (10, 3, 2, 512, 512, 1, None, false),
        (11, 3, 1, 1024, 512, 2, Some(9), false),
        (12, 3, 1, 1024, 512, 4, Some(8), false),
        (13, 3, 1, 1024, 512, 8, Some(7), false),
        (14, 3, 1, 1024, 512, 16, Some(6), true),
        (15, 3, 1, 1024, 512, 32, Some(5), true),
        (16, 3, 1, 1024, 512, 64, Some(4), true),
        (17, 3, 1, 512 + 256, 256, 128, Some(3), false),
        (18, 3, 1, 256 + 128, 128, 256, Some(2), false),
        (19, 3, 1, 128 + 64, 64, 512, Some(1), false),
        (20, 3, 1, 64 + 4, 3, 1024, Some(0), false),
    ]
}

/// `(out_channels, stride)` per critic layer for base width `c`.
pub fn res256_critic(c: usize) -> Vec<(usize, usize)> {
    vec![(c, 2), (2 * c, 2), (4 * c, 2), (8 * c, 1), (1, 1)]
}

pub fn res1024_critic(c: usize) -> Vec<(usize, usize)> {
    vec![
        (c, 2),
        (2 * c, 2),
        (4 * c, 2),
        (8 * c, 2),
        (8 * c, 2),
        (8 * c, 1),
        (1, 1),
    ]
}

/// Side after a 4×4 convolution with padding 1.
pub fn k4(n: usize, stride: usize) -> Option<usize> {
    (n + 2).checked_sub(4).map(|v| v / stride + 1)
}
