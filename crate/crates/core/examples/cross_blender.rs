//! Word-level cross-attention swapping for "boat" -> "kayak" and "lake" -> "river".

use ndarray::{s, Array3};
use vidattn::control::cross_blender;
use vidattn::{align_edit_words, AttentionMap, MapKey, MapKind, Tokenizer, WordTokenizer};

fn map(seed: usize, keys: usize) -> vidattn::Result<AttentionMap> {
    let mut w = Array3::from_shape_fn((1, 4, keys), |(_, q, j)| 1.0 + ((seed * 31 + q * 7 + j * 3) % 11) as f32);
    for mut row in w.lanes_mut(ndarray::Axis(2)) {
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    AttentionMap::new(MapKey { t: 10, layer: 1, kind: MapKind::Cross, frame: 0 }, (2, 2), w)
}

fn main() -> vidattn::Result<()> {
    let tok = WordTokenizer::default();
    let source = tok.tokenize("a boat on the lake")?;
    let edit = tok.tokenize("a kayak on the river")?;
    let spec = align_edit_words(&source, &edit, &[("boat", "kayak"), ("lake", "river")])?;
    println!("source tokens {:?}", source.words().collect::<Vec<_>>());
    println!("edit tokens   {:?}", edit.words().collect::<Vec<_>>());
    for j in 0..spec.edit_len() {
        match spec.source_token_for(j) {
            Some(i) => println!("edit column {j} <- source column {i}"),
            None => println!("edit column {j} <- probe (edited word)"),
        }
    }

    let src = map(1, spec.source_len())?;
    let probe = map(2, spec.edit_len())?;
    let out = cross_blender(&src, &probe, &spec)?;
    println!("query 0, source  {:.3}", src.weights.slice(s![0, 0, ..]));
    println!("query 0, probe   {:.3}", probe.weights.slice(s![0, 0, ..]));
    println!("query 0, blended {:.3}", out.weights.slice(s![0, 0, ..]));
    println!("row drift before renormalization {:.3}", out.max_row_drift());
    Ok(())
}
