//! Fixtures shared by the benchmarks.

use fsac_core::stmetric::{frame_positions, FramePos};
use fsac_core::{generate_world, EmbeddingHead, Matrix, World, WorldConfig};

/// A generated world of `n_books` books at the default density.
pub fn world(n_books: usize) -> World {
    generate_world(&WorldConfig {
        n_books,
        seed: 1,
        ..Default::default()
    })
    .expect("default world config is valid")
}

/// Head-space features of the faces, as the trainer sees them at epoch one.
pub fn face_features(world: &World) -> Matrix {
    let d = world.faces.dim();
    EmbeddingHead::identity(d, d)
        .forward_all(&world.faces.embeddings())
        .expect("generated embeddings are non-zero")
}

/// The first `size` faces as a mining batch with ground-truth labels.
pub fn batch(world: &World, size: usize) -> (Matrix, Vec<FramePos>, Vec<Option<usize>>) {
    let feats = face_features(world);
    let size = size.min(feats.rows());
    let rows: Vec<&[f64]> = (0..size).map(|i| feats.row(i)).collect();
    let samples = &world.faces.samples()[..size];
    let mut names: Vec<&str> = samples.iter().filter_map(|s| s.identity.as_deref()).collect();
    names.sort_unstable();
    names.dedup();
    let labels = samples
        .iter()
        .map(|s| s.identity.as_deref().and_then(|i| names.binary_search(&i).ok()))
        .collect();
    (Matrix::from_rows(&rows).expect("non-empty batch"), frame_positions(samples), labels)
}
