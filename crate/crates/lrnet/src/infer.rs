//! Sliding-window inference: plan a non-overlapping tile cover of the
//! zero-padded frame, run the network per tile, stitch, and crop back.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LrNet;
use crate::tensor::Tensor;

/// A non-overlapping cover of the padded frame by window-sized tiles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub window: usize,
    /// Original extents.
    pub h: usize,
    pub w: usize,
    /// Padded extents: the smallest window multiples covering the input.
    pub padded_h: usize,
    pub padded_w: usize,
    /// Tile origins in row-major order.
    pub origins: Vec<(usize, usize)>,
}

/// Plan the tile cover for an h×w input at the given window.
pub fn tile_plan(h: usize, w: usize, window: usize) -> Result<TileGrid> {
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Data(format!("cannot tile an empty {h}x{w} input")));
    }
    let padded_h = h.div_ceil(window) * window;
    let padded_w = w.div_ceil(window) * window;
    let mut origins = Vec::with_capacity((padded_h / window) * (padded_w / window));
    for oy in (0..padded_h).step_by(window) {
        for ox in (0..padded_w).step_by(window) {
            origins.push((oy, ox));
        }
    }
    Ok(TileGrid { window, h, w, padded_h, padded_w, origins })
}

fn single_map_extents(t: &Tensor<f32>) -> Result<(usize, usize)> {
    if t.n() != 1 || t.c() != 1 {
        return Err(Error::Data(format!(
            "expected one single-channel map, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.h(), t.w()))
}

fn copy_window(src: &Tensor<f32>, sy: usize, sx: usize, dst: &mut Tensor<f32>, dy: usize, dx: usize, hh: usize, ww: usize) {
    for y in 0..hh {
        for x in 0..ww {
            dst.set(0, 0, dy + y, dx + x, src.at(0, 0, sy + y, sx + x));
        }
    }
}

/// Attach the failing tile's origin to an error without changing its kind.
fn tag_tile(err: Error, oy: usize, ox: usize) -> Error {
    let note = format!("tile at ({oy},{ox}): ");
    match err {
        Error::Config(m) => Error::Config(format!("{note}{m}")),
        Error::Data(m) => Error::Data(format!("{note}{m}")),
        Error::Numeric(m) => Error::Numeric(format!("{note}{m}")),
        io @ Error::Io { .. } => io,
    }
}

/// Zero-pad the input to the tile frame, apply `per_tile` to every tile,
/// stitch the outputs, and crop to the original extents. `per_tile` must
/// map a [1,1,window,window] tensor to the same extents; tiles run in
/// parallel and each writes a disjoint output region, so the result is
/// schedule-invariant.
pub fn sliding_map<F>(image: &Tensor<f32>, window: usize, per_tile: F) -> Result<Tensor<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let (h, w) = single_map_extents(image)?;
    let grid = tile_plan(h, w, window)?;

    let mut padded = Tensor::<f32>::zeros([1, 1, grid.padded_h, grid.padded_w]);
    copy_window(image, 0, 0, &mut padded, 0, 0, h, w);

    let tiles: Vec<(usize, usize, Tensor<f32>)> = grid
        .origins
        .par_iter()
        .map(|&(oy, ox)| {
            let mut tile = Tensor::<f32>::zeros([1, 1, window, window]);
            copy_window(&padded, oy, ox, &mut tile, 0, 0, window, window);
            let out = per_tile(&tile).map_err(|e| tag_tile(e, oy, ox))?;
            if out.shape() != [1, 1, window, window] {
                return Err(Error::Data(format!(
                    "tile at ({oy},{ox}): per-tile output shape {:?} does not match the window",
                    out.shape()
                )));
            }
            Ok((oy, ox, out))
        })
        .collect::<Result<_>>()?;

    let mut stitched = Tensor::<f32>::zeros([1, 1, grid.padded_h, grid.padded_w]);
    for (oy, ox, tile) in tiles {
        copy_window(&tile, 0, 0, &mut stitched, oy, ox, window, window);
    }

    let mut out = Tensor::<f32>::zeros([1, 1, h, w]);
    copy_window(&stitched, 0, 0, &mut out, 0, 0, h, w);
    Ok(out)
}

/// Tiled forward pass: probability map at the input's extents.
pub fn sliding_infer(model: &LrNet<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    sliding_map(image, model.config().window, |tile| model.forward_infer(tile))
}

/// Binarize probabilities at `tau` (a probability exactly at the threshold
/// counts as foreground).
pub fn threshold_mask(prob: &Tensor<f32>, tau: f32) -> Tensor<f32> {
    prob.map(|p| if p >= tau { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec([1, 1, h, w], (0..h * w).map(|i| i as f32 / (h * w) as f32).collect())
            .unwrap()
    }

    #[test]
    fn plans_match_hand_arithmetic() {
        let exact = tile_plan(1024, 1024, 256).unwrap();
        assert_eq!(exact.origins.len(), 16);
        assert_eq!((exact.padded_h, exact.padded_w), (1024, 1024));
        assert_eq!(&exact.origins[..5], &[(0, 0), (0, 256), (0, 512), (0, 768), (256, 0)]);

        let padded = tile_plan(300, 300, 256).unwrap();
        assert_eq!((padded.padded_h, padded.padded_w), (512, 512));
        assert_eq!(padded.origins, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);

        let single = tile_plan(256, 256, 256).unwrap();
        assert_eq!(single.origins, vec![(0, 0)]);
    }

    #[test]
    fn plan_rejects_degenerate_inputs() {
        assert_eq!(tile_plan(10, 10, 0).unwrap_err().exit_code(), 1);
        assert_eq!(tile_plan(0, 10, 32).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn identity_per_tile_returns_the_original() {
        let image = ramp(70, 50);
        let out = sliding_map(&image, 32, |tile| Ok(tile.clone())).unwrap();
        assert_eq!(out.shape(), image.shape());
        assert_eq!(out.data(), image.data());
    }

    #[test]
    fn model_tiles_are_bit_identical_to_direct_forward() {
        let cfg = ModelConfig { window: 32, ..Default::default() };
        let model = LrNet::<f32>::init(cfg, 11).unwrap();
        let image = ramp(64, 64);
        let out = sliding_infer(&model, &image).unwrap();
        for (oy, ox) in [(0, 0), (0, 32), (32, 0), (32, 32)] {
            let mut tile = Tensor::<f32>::zeros([1, 1, 32, 32]);
            copy_window(&image, oy, ox, &mut tile, 0, 0, 32, 32);
            let direct = model.forward_infer(&tile).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(
                        out.at(0, 0, oy + y, ox + x),
                        direct.at(0, 0, y, x),
                        "mismatch in tile ({oy},{ox}) at ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn padding_influence_is_confined_to_padded_tiles() {
        // 40×56 at window 32 pads to 64×64; the (0,0) tile contains no
        // padding, so its output region must match the direct forward.
        let cfg = ModelConfig { window: 32, ..Default::default() };
        let model = LrNet::<f32>::init(cfg, 12).unwrap();
        let image = ramp(40, 56);
        let out = sliding_infer(&model, &image).unwrap();
        assert_eq!(out.shape(), [1, 1, 40, 56]);
        assert!(out.data().iter().all(|&p| (0.0..=1.0).contains(&p)));

        let mut interior = Tensor::<f32>::zeros([1, 1, 32, 32]);
        copy_window(&image, 0, 0, &mut interior, 0, 0, 32, 32);
        let direct = model.forward_infer(&interior).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(out.at(0, 0, y, x), direct.at(0, 0, y, x));
            }
        }
    }

    #[test]
    fn per_tile_errors_carry_the_origin() {
        let image = ramp(64, 64);
        let err = sliding_map(&image, 32, |tile| {
            if tile.at(0, 0, 0, 0) > 0.4 {
                Err(Error::Numeric("activation overflow".into()))
            } else {
                Ok(tile.clone())
            }
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("tile at (32,") && msg.contains("overflow"), "{msg}");
    }

    #[test]
    fn threshold_uses_at_least_semantics() {
        let prob = Tensor::from_vec([1, 1, 1, 4], vec![0.4, 0.5, 0.6, 0.0]).unwrap();
        assert_eq!(threshold_mask(&prob, 0.5).data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(threshold_mask(&prob, 0.0).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn tiles_partition_the_padded_frame(
            h in 1usize..200,
            w in 1usize..200,
            window in 1usize..48,
        ) {
            let grid = tile_plan(h, w, window).unwrap();
            prop_assert!(grid.padded_h - h < window && grid.padded_w - w < window);
            let mut cover = vec![0u8; grid.padded_h * grid.padded_w];
            for (oy, ox) in &grid.origins {
                for y in *oy..oy + window {
                    for x in *ox..ox + window {
                        cover[y * grid.padded_w + x] += 1;
                    }
                }
            }
            prop_assert!(cover.iter().all(|&c| c == 1));
        }
    }
}
