//! Spatial division of NHWC feature maps into local and contextual windows.
//!
//! Local windows are contiguous `G x G` tiles in raster order. Contextual
//! windows sample the map at a fixed interval, so window `(a, b)` holds
//! pixels `(a + i*I_h, b + j*I_w)` and spans the whole map. Both are pixel
//! bijections expressed as row gathers, so [`aggregate`] pastes windows back
//! exactly.

use crate::engine::{Rows, Var};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::resample::image_dims;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Contiguous `g x g` tiles.
    Local { g: usize },
    /// Strided sampling with intervals `(ih, iw)`.
    Contextual { ih: usize, iw: usize },
}

/// Partition geometry plus the gather table realising it.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub strategy: Strategy,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub win_h: usize,
    pub win_w: usize,
    /// Windows per image.
    pub count: usize,
    rows: Rows,
}

impl Partition {
    pub fn local(n: usize, h: usize, w: usize, c: usize, g: usize) -> Result<Self> {
        if g == 0 || h % g != 0 || w % g != 0 {
            return Err(shape_err(format!(
                "{h}x{w} map is not divisible into {g}x{g} local windows"
            )));
        }
        let (th, tw) = (h / g, w / g);
        let mut table = Vec::with_capacity(n * h * w);
        for ni in 0..n {
            for ty in 0..th {
                for tx in 0..tw {
                    for dy in 0..g {
                        for dx in 0..g {
                            table.push((ni * h + ty * g + dy) * w + tx * g + dx);
                        }
                    }
                }
            }
        }
        Ok(Self {
            strategy: Strategy::Local { g },
            n,
            h,
            w,
            c,
            win_h: g,
            win_w: g,
            count: th * tw,
            rows: Rows::new(table, c),
        })
    }

    pub fn contextual(n: usize, h: usize, w: usize, c: usize, ih: usize, iw: usize) -> Result<Self> {
        if ih == 0 || iw == 0 || h % ih != 0 || w % iw != 0 {
            return Err(shape_err(format!(
                "{h}x{w} map is not divisible by sampling interval {ih}x{iw}"
            )));
        }
        let (gh, gw) = (h / ih, w / iw);
        let mut table = Vec::with_capacity(n * h * w);
        for ni in 0..n {
            for a in 0..ih {
                for b in 0..iw {
                    for i in 0..gh {
                        for j in 0..gw {
                            table.push((ni * h + a + i * ih) * w + b + j * iw);
                        }
                    }
                }
            }
        }
        Ok(Self {
            strategy: Strategy::Contextual { ih, iw },
            n,
            h,
            w,
            c,
            win_h: gh,
            win_w: gw,
            count: ih * iw,
            rows: Rows::new(table, c),
        })
    }

    pub fn for_shape(shape: &[usize], strategy: Strategy) -> Result<Self> {
        let (n, h, w, c) = image_dims(shape)?;
        match strategy {
            Strategy::Local { g } => Self::local(n, h, w, c, g),
            Strategy::Contextual { ih, iw } => Self::contextual(n, h, w, c, ih, iw),
        }
    }

    /// `[N, count, win_h * win_w, C]`.
    pub fn window_shape(&self) -> Vec<usize> {
        vec![self.n, self.count, self.win_h * self.win_w, self.c]
    }

    pub fn map_shape(&self) -> Vec<usize> {
        vec![self.n, self.h, self.w, self.c]
    }

    pub fn rows(&self) -> &Rows {
        &self.rows
    }

    pub fn partition_var<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.gather(&self.rows, self.window_shape())
    }

    pub fn aggregate_var<'t, T: Real>(&self, windows: Var<'t, T>) -> Result<Var<'t, T>> {
        if windows.numel() != self.n * self.h * self.w * self.c {
            return Err(shape_err(format!(
                "{:?} windows do not tile a {:?} map",
                windows.shape(),
                self.map_shape()
            )));
        }
        windows.gather(&self.rows.inverse(), self.map_shape())
    }
}

/// Windows cut from a feature map, with enough metadata to paste them back.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet<T: Real = f32> {
    /// `[N, count, win_h * win_w, C]`, pixels in raster order within a window.
    pub windows: Tensor<T>,
    pub partition: Partition,
}

impl<T: Real> WindowSet<T> {
    pub fn len(&self) -> usize {
        self.partition.n * self.partition.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Window `k` of image `n` as a `[win_h * win_w, C]` tensor.
    pub fn window(&self, n: usize, k: usize) -> Tensor<T> {
        let p = &self.partition;
        let sz = p.win_h * p.win_w * p.c;
        let off = (n * p.count + k) * sz;
        Tensor::new(
            vec![p.win_h * p.win_w, p.c],
            self.windows.data()[off..off + sz].to_vec(),
        )
        .expect("window slice")
    }
}

fn partition<T: Real>(f: &Tensor<T>, strategy: Strategy) -> Result<WindowSet<T>> {
    let p = Partition::for_shape(f.shape(), strategy)?;
    let windows = Tensor::new(p.window_shape(), p.rows.apply(f.data()))?;
    Ok(WindowSet { windows, partition: p })
}

pub fn partition_local<T: Real>(f: &Tensor<T>, g: usize) -> Result<WindowSet<T>> {
    partition(f, Strategy::Local { g })
}

/// Square sampling interval; window sides are `H / I` by `W / I`.
pub fn partition_context<T: Real>(f: &Tensor<T>, interval: usize) -> Result<WindowSet<T>> {
    partition(
        f,
        Strategy::Contextual {
            ih: interval,
            iw: interval,
        },
    )
}

pub fn partition_context_axes<T: Real>(f: &Tensor<T>, ih: usize, iw: usize) -> Result<WindowSet<T>> {
    partition(f, Strategy::Contextual { ih, iw })
}

/// Pastes windows back to their source positions as an NHWC map.
pub fn aggregate<T: Real>(ws: &WindowSet<T>) -> Result<Tensor<T>> {
    let p = &ws.partition;
    if ws.windows.shape() != p.window_shape().as_slice() {
        return Err(Error::InvalidArgument(format!(
            "window tensor {:?} inconsistent with partition {:?}",
            ws.windows.shape(),
            p.window_shape()
        )));
    }
    let data = p.rows.inverse().apply(ws.windows.data());
    Tensor::new(p.map_shape(), data)
}

#[cfg(test)]
mod tests {
    use super::{Strategy, *};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coords(h: usize, w: usize) -> Tensor<f32> {
        // each pixel stores its own (y, x)
        Tensor::from_fn(vec![1, h, w, 2], |i| {
            let p = i / 2;
            if i % 2 == 0 {
                (p / w) as f32
            } else {
                (p % w) as f32
            }
        })
    }

    fn pixels(win: &Tensor<f32>) -> Vec<(usize, usize)> {
        win.data()
            .chunks(2)
            .map(|p| (p[0] as usize, p[1] as usize))
            .collect()
    }

    #[test]
    fn local_window_zero_is_top_left_tile() {
        let ws = partition_local(&coords(4, 4), 2).unwrap();
        assert_eq!(ws.len(), 4);
        assert_eq!(pixels(&ws.window(0, 0)), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(pixels(&ws.window(0, 1)), vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
    }

    #[test]
    fn single_local_window_is_flattened_map() {
        let f = coords(3, 3);
        let ws = partition_local(&f, 3).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.windows.data(), f.data());
    }

    #[test]
    fn context_window_samples_at_interval() {
        let ws = partition_context(&coords(4, 4), 2).unwrap();
        assert_eq!(ws.len(), 4);
        assert_eq!(pixels(&ws.window(0, 0)), vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        assert_eq!(pixels(&ws.window(0, 1)), vec![(0, 1), (0, 3), (2, 1), (2, 3)]);
        assert_eq!(pixels(&ws.window(0, 2)), vec![(1, 0), (1, 2), (3, 0), (3, 2)]);
    }

    #[test]
    fn unit_interval_is_whole_map() {
        let f = coords(4, 6);
        let ws = partition_context(&f, 1).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.windows.data(), f.data());
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let f = Tensor::<f32>::zeros(vec![1, 6, 6, 1]);
        assert!(matches!(partition_local(&f, 4), Err(Error::Shape(_))));
        assert!(matches!(partition_context(&f, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn round_trips_on_fixed_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f32>::uniform(vec![1, 8, 8, 3], -1.0, 1.0, &mut rng);
        assert_eq!(aggregate(&partition_local(&f, 4).unwrap()).unwrap(), f);
        let g = Tensor::<f32>::uniform(vec![1, 6, 6, 2], -1.0, 1.0, &mut rng);
        assert_eq!(aggregate(&partition_context(&g, 3).unwrap()).unwrap(), g);
    }

    #[test]
    fn single_pixel_edit_lands_in_one_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::<f32>::uniform(vec![1, 6, 6, 2], -1.0, 1.0, &mut rng);
        for strategy in [Strategy::Local { g: 3 }, Strategy::Contextual { ih: 2, iw: 3 }] {
            let mut ws = partition(&f, strategy).unwrap();
            ws.windows.data_mut()[17] += 10.0;
            let back = aggregate(&ws).unwrap();
            let changed: Vec<_> = back
                .data()
                .iter()
                .zip(f.data())
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(changed.len(), 1, "{strategy:?}");
            let row = ws.partition.rows().table[17 / 2];
            assert_eq!(changed[0], row * 2 + 17 % 2);
        }
    }

    #[test]
    fn inconsistent_metadata_is_rejected() {
        let f = Tensor::<f32>::zeros(vec![1, 4, 4, 1]);
        let mut ws = partition_local(&f, 2).unwrap();
        ws.windows = Tensor::zeros(vec![1, 3, 4, 1]);
        assert!(aggregate(&ws).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_bijections(n in 1usize..3, th in 1usize..4, tw in 1usize..4,
                                     g in 1usize..5, c in 1usize..4, contextual in any::<bool>(),
                                     seed in any::<u64>()) {
            let (h, w) = (th * g, tw * g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::<f32>::uniform(vec![n, h, w, c], -1.0, 1.0, &mut rng);
            let strategy = if contextual {
                Strategy::Contextual { ih: th, iw: tw }
            } else {
                Strategy::Local { g }
            };
            let ws = partition(&f, strategy).unwrap();
            prop_assert!(ws.partition.rows().is_permutation(n * h * w));
            let mut a: Vec<u32> = ws.windows.data().iter().map(|x| x.to_bits()).collect();
            let mut b: Vec<u32> = f.data().iter().map(|x| x.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert_eq!(aggregate(&ws).unwrap(), f);
        }
    }
}
