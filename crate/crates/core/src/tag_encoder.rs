//! Trainable tag encoder: compositional field-value embeddings, a learnable
//! CLS token, and a 3-layer pre-LayerNorm transformer producing per-tag
//! contextualized embeddings plus a global production-specification vector.
//!
//! Tags are embedded additively: the field row selects the axis identity and
//! the value row the specific token, so tags sharing a field share that
//! component. No positional encodings are added over tag tokens; a
//! production spec is a set, and the encoder is permutation-equivariant.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::numerics::{Graph, NodeId, NumericsError, ParamMap, SeededRng, Tensor};
use crate::taxonomy::{ProductionSpec, SubAxis, Tag, Vocabulary};

pub const N_TAG_LAYERS: usize = 3;
pub const FFN_EXPANSION: usize = 4;
/// Transformer init scale for trainable matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum TagEncoderError {
    #[error("tag missing from embedding tables: {0}")]
    UnknownTag(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Field and value embedding tables with their index maps.
#[derive(Clone, Debug)]
pub struct TagEmbeddingTables {
    /// `[4 x d]`, one row per taxonomy field.
    pub w_field: Tensor,
    /// `[n x d]`, one row per canonical value across all sub-axes.
    pub w_value: Tensor,
    value_rows: BTreeMap<(SubAxis, String), usize>,
}

impl TagEmbeddingTables {
    pub fn new(vocab: &Vocabulary, d: usize, rng: &mut SeededRng) -> Self {
        let mut value_rows = BTreeMap::new();
        let mut next = 0usize;
        for axis in SubAxis::ALL {
            for entry in vocab.values(axis) {
                value_rows.insert((axis, crate::taxonomy::normalize_token(&entry.value)), next);
                next += 1;
            }
        }
        Self {
            w_field: Tensor::randn(vec![4, d], INIT_STD, rng),
            w_value: Tensor::randn(vec![next, d], INIT_STD, rng),
            value_rows,
        }
    }

    pub fn value_count(&self) -> usize {
        self.value_rows.len()
    }

    pub fn width(&self) -> usize {
        self.w_field.shape()[1]
    }

    pub fn value_row(&self, tag: &Tag) -> Result<usize, TagEncoderError> {
        self.value_rows
            .get(&(tag.axis, tag.normalized()))
            .copied()
            .ok_or_else(|| TagEncoderError::UnknownTag(tag.to_string()))
    }

    /// One-hot selection matrices `[k x 4]` and `[k x n]` picking each tag's
    /// field and value rows; embeddings are then plain matrix products, which
    /// keeps row lookups differentiable.
    pub fn selectors(&self, tags: &[Tag]) -> Result<(Tensor, Tensor), TagEncoderError> {
        let k = tags.len();
        let n = self.value_count();
        let mut field_sel = vec![0.0; k * 4];
        let mut value_sel = vec![0.0; k * n];
        for (i, tag) in tags.iter().enumerate() {
            field_sel[i * 4 + tag.field().index()] = 1.0;
            value_sel[i * n + self.value_row(tag)?] = 1.0;
        }
        Ok((
            Tensor::new(vec![k, 4], field_sel).expect("shape"),
            Tensor::new(vec![k, n], value_sel).expect("shape"),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TagEncoderLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl TagEncoderLayer {
    fn new(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            wq: Tensor::randn(vec![d, d], INIT_STD, rng),
            wk: Tensor::randn(vec![d, d], INIT_STD, rng),
            wv: Tensor::randn(vec![d, d], INIT_STD, rng),
            wo: Tensor::randn(vec![d, d], INIT_STD, rng),
            w1: Tensor::randn(vec![d, d * FFN_EXPANSION], INIT_STD, rng),
            w2: Tensor::randn(vec![d * FFN_EXPANSION, d], INIT_STD, rng),
        }
    }
}

/// Per-tag contextual embeddings and the global CLS vector.
#[derive(Clone, Debug)]
pub struct TagEncoding {
    /// `[k x d]`.
    pub h_seq: Tensor,
    /// `[1 x d]`, the contextualized CLS output.
    pub h_global: Tensor,
}

/// Graph node handles for one encoder layer.
#[derive(Clone, Copy)]
pub struct LayerNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
}

/// Graph node handles for all encoder parameters, in `ParamMap` order.
pub struct TagEncoderNodes {
    pub w_field: NodeId,
    pub w_value: NodeId,
    pub cls: NodeId,
    pub layers: Vec<LayerNodes>,
}

impl TagEncoderNodes {
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = vec![self.w_field, self.w_value, self.cls];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.w2]);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TagEncoder {
    pub d: usize,
    pub tables: TagEmbeddingTables,
    /// `[1 x d]` learnable CLS token.
    pub cls: Tensor,
    pub layers: Vec<TagEncoderLayer>,
}

impl TagEncoder {
    pub fn new(vocab: &Vocabulary, d: usize, rng: &mut SeededRng) -> Self {
        Self {
            d,
            tables: TagEmbeddingTables::new(vocab, d, rng),
            cls: Tensor::randn(vec![1, d], INIT_STD, rng),
            layers: (0..N_TAG_LAYERS).map(|_| TagEncoderLayer::new(d, rng)).collect(),
        }
    }

    /// Compositional embedding rows e_i = field row + value row, in the
    /// spec's canonical (sorted) order.
    pub fn embed_tags(&self, spec: &ProductionSpec) -> Result<Tensor, TagEncoderError> {
        let (fs, vs) = self.tables.selectors(spec.tags())?;
        Ok(fs
            .matmul(&self.tables.w_field)?
            .add(&vs.matmul(&self.tables.w_value)?)?)
    }

    /// Register every parameter as a graph leaf, in `ParamMap` order.
    pub fn leaves(&self, g: &mut Graph) -> TagEncoderNodes {
        TagEncoderNodes {
            w_field: g.leaf(self.tables.w_field.clone()),
            w_value: g.leaf(self.tables.w_value.clone()),
            cls: g.leaf(self.cls.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerNodes {
                    wq: g.leaf(l.wq.clone()),
                    wk: g.leaf(l.wk.clone()),
                    wv: g.leaf(l.wv.clone()),
                    wo: g.leaf(l.wo.clone()),
                    w1: g.leaf(l.w1.clone()),
                    w2: g.leaf(l.w2.clone()),
                })
                .collect(),
        }
    }

    fn layer_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        l: &LayerNodes,
    ) -> Result<NodeId, NumericsError> {
        let scale = 1.0 / (self.d as f64).sqrt();
        let ln1 = g.layer_norm(x);
        let q = g.matmul(ln1, l.wq)?;
        let k = g.matmul(ln1, l.wk)?;
        let v = g.matmul(ln1, l.wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, scale);
        let probs = g.softmax_rows(scaled);
        let ctx = g.matmul(probs, v)?;
        let attn = g.matmul(ctx, l.wo)?;
        let x1 = g.add(x, attn)?;
        let ln2 = g.layer_norm(x1);
        let hidden = g.matmul(ln2, l.w1)?;
        let act = g.silu(hidden);
        let ffn = g.matmul(act, l.w2)?;
        g.add(x1, ffn)
    }

    /// Build the encoder forward pass on a graph over an explicit tag order.
    /// Returns (h_seq node `[k x d]`, h_global node `[1 x d]`).
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        nodes: &TagEncoderNodes,
        tags: &[Tag],
    ) -> Result<(NodeId, NodeId), TagEncoderError> {
        let k = tags.len();
        let (fs, vs) = self.tables.selectors(tags)?;
        let seq = if k > 0 {
            let fs_id = g.constant(fs);
            let vs_id = g.constant(vs);
            let fe = g.matmul(fs_id, nodes.w_field)?;
            let ve = g.matmul(vs_id, nodes.w_value)?;
            let embeds = g.add(fe, ve)?;
            g.concat_rows(&[nodes.cls, embeds])?
        } else {
            nodes.cls
        };
        let mut x = seq;
        for l in &nodes.layers {
            x = self.layer_graph(g, x, l)?;
        }
        let h_global = g.slice_rows(x, 0, 1)?;
        let h_seq = g.slice_rows(x, 1, k + 1)?;
        Ok((h_seq, h_global))
    }

    /// Encode tags in the given order (no sorting). Used by the permutation
    /// tests; production code goes through [`TagEncoder::encode`].
    pub fn encode_tags_ordered(&self, tags: &[Tag]) -> Result<TagEncoding, TagEncoderError> {
        let mut g = Graph::new();
        let nodes = self.leaves(&mut g);
        let (h_seq, h_global) = self.encode_graph(&mut g, &nodes, tags)?;
        Ok(TagEncoding {
            h_seq: g.value(h_seq).clone(),
            h_global: g.value(h_global).clone(),
        })
    }

    /// Encode a production spec. The spec's tags are already in canonical
    /// sorted order, so fixtures are reproducible regardless of input order.
    pub fn encode(&self, spec: &ProductionSpec) -> Result<TagEncoding, TagEncoderError> {
        self.encode_tags_ordered(spec.tags())
    }
}

impl ParamMap for TagEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("tag_encoder.w_field", &self.tables.w_field);
        f("tag_encoder.w_value", &self.tables.w_value);
        f("tag_encoder.cls", &self.cls);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("tag_encoder.layer{i}.wq"), &l.wq);
            f(&format!("tag_encoder.layer{i}.wk"), &l.wk);
            f(&format!("tag_encoder.layer{i}.wv"), &l.wv);
            f(&format!("tag_encoder.layer{i}.wo"), &l.wo);
            f(&format!("tag_encoder.layer{i}.w1"), &l.w1);
            f(&format!("tag_encoder.layer{i}.w2"), &l.w2);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("tag_encoder.w_field", &mut self.tables.w_field);
        f("tag_encoder.w_value", &mut self.tables.w_value);
        f("tag_encoder.cls", &mut self.cls);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("tag_encoder.layer{i}.wq"), &mut l.wq);
            f(&format!("tag_encoder.layer{i}.wk"), &mut l.wk);
            f(&format!("tag_encoder.layer{i}.wv"), &mut l.wv);
            f(&format!("tag_encoder.layer{i}.wo"), &mut l.wo);
            f(&format!("tag_encoder.layer{i}.w1"), &mut l.w1);
            f(&format!("tag_encoder.layer{i}.w2"), &mut l.w2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, layer_norm, softmax_attention, silu};
    use crate::taxonomy::SynonymDictionary;

    fn dict() -> &'static SynonymDictionary {
        SynonymDictionary::shipped_default()
    }

    fn fig1_spec() -> ProductionSpec {
        ProductionSpec::from_tags([
            dict().canonicalize("Shinkai Style").unwrap(),
            dict().canonicalize("2D Daily").unwrap(),
            dict().canonicalize("medium shot").unwrap(),
            dict().canonicalize("eye level").unwrap(),
            dict().canonicalize("static").unwrap(),
        ])
    }

    fn encoder(seed: u64) -> TagEncoder {
        let mut rng = SeededRng::new(seed);
        TagEncoder::new(Vocabulary::shipped_default(), 16, &mut rng)
    }

    #[test]
    fn embeddings_are_field_plus_value_rows() {
        let enc = encoder(1);
        let spec = fig1_spec();
        let embeds = enc.embed_tags(&spec).unwrap();
        for (i, tag) in spec.tags().iter().enumerate() {
            let frow = enc.tables.w_field.row_slice(tag.field().index());
            let vrow = enc
                .tables
                .w_value
                .row_slice(enc.tables.value_row(tag).unwrap());
            for (j, &x) in embeds.row_slice(i).iter().enumerate() {
                assert_eq!(x, frow[j] + vrow[j], "tag {tag} column {j}");
            }
        }
    }

    #[test]
    fn zero_field_table_leaves_value_rows() {
        let mut enc = encoder(2);
        enc.tables.w_field = Tensor::zeros(vec![4, 16]);
        let spec = fig1_spec();
        let embeds = enc.embed_tags(&spec).unwrap();
        for (i, tag) in spec.tags().iter().enumerate() {
            let vrow = enc
                .tables
                .w_value
                .row_slice(enc.tables.value_row(tag).unwrap());
            assert_eq!(embeds.row_slice(i), vrow);
        }
    }

    #[test]
    fn shared_field_tags_differ_by_value_rows() {
        let enc = encoder(3);
        let a = dict().canonicalize("Shinkai Style").unwrap();
        let b = dict().canonicalize("Miyazaki Style").unwrap();
        let spec = ProductionSpec::from_tags([a.clone(), b.clone()]);
        let embeds = enc.embed_tags(&spec).unwrap();
        let ra = enc.tables.value_row(&a).unwrap();
        let rb = enc.tables.value_row(&b).unwrap();
        // Spec order is sorted; row 0 holds the lexically smaller value.
        let (row_a, row_b) = if spec.tags()[0] == a { (0, 1) } else { (1, 0) };
        for j in 0..16 {
            let diff = embeds.row_slice(row_a)[j] - embeds.row_slice(row_b)[j];
            let expect = enc.tables.w_value.row_slice(ra)[j] - enc.tables.w_value.row_slice(rb)[j];
            assert!((diff - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_spec_yields_cls_only_encoding() {
        let enc = encoder(4);
        let out = enc.encode(&ProductionSpec::new()).unwrap();
        assert_eq!(out.h_seq.shape(), &[0, 16]);
        assert_eq!(out.h_global.shape(), &[1, 16]);
        assert!(out.h_global.all_finite());
    }

    #[test]
    fn duplicate_free_spec_gets_one_row_per_tag() {
        let enc = encoder(5);
        let spec = fig1_spec();
        let out = enc.encode(&spec).unwrap();
        assert_eq!(out.h_seq.shape(), &[spec.len(), 16]);
    }

    #[test]
    fn permutation_leaves_global_invariant_and_permutes_rows() {
        let enc = encoder(6);
        let tags = fig1_spec().tags().to_vec();
        let base = enc.encode_tags_ordered(&tags).unwrap();
        // A couple of hand-picked permutations of the 5 tags.
        for perm in [[4usize, 3, 2, 1, 0], [2, 0, 4, 1, 3]] {
            let permuted: Vec<Tag> = perm.iter().map(|&i| tags[i].clone()).collect();
            let out = enc.encode_tags_ordered(&permuted).unwrap();
            let dev = out
                .h_global
                .sub(&base.h_global)
                .unwrap()
                .max_abs();
            assert!(dev < 1e-10, "h_global deviation {dev}");
            for (new_row, &old_row) in perm.iter().enumerate() {
                let got = out.h_seq.row_slice(new_row);
                let want = base.h_seq.row_slice(old_row);
                let max = got
                    .iter()
                    .zip(want)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(max < 1e-10, "row {new_row} deviates by {max}");
            }
        }
    }

    #[test]
    fn sorted_public_encode_is_order_independent_bitwise() {
        let enc = encoder(7);
        let tags = fig1_spec().tags().to_vec();
        let forward = ProductionSpec::from_tags(tags.clone());
        let reversed = ProductionSpec::from_tags(tags.into_iter().rev().collect::<Vec<_>>());
        let a = enc.encode(&forward).unwrap();
        let b = enc.encode(&reversed).unwrap();
        assert_eq!(a.h_global, b.h_global);
        assert_eq!(a.h_seq, b.h_seq);
    }

    /// Straight-line reference forward pass, independent of the graph.
    fn naive_encode(enc: &TagEncoder, spec: &ProductionSpec) -> Tensor {
        let embeds = enc.embed_tags(spec).unwrap();
        let mut x = Tensor::concat_rows(&[&enc.cls, &embeds]).unwrap();
        for l in &enc.layers {
            let ln1 = layer_norm(&x);
            let q = ln1.matmul(&l.wq).unwrap();
            let k = ln1.matmul(&l.wk).unwrap();
            let v = ln1.matmul(&l.wv).unwrap();
            let attn = softmax_attention(&q, &k, &v).unwrap().matmul(&l.wo).unwrap();
            let x1 = x.add(&attn).unwrap();
            let ln2 = layer_norm(&x1);
            let ffn = silu(&ln2.matmul(&l.w1).unwrap()).matmul(&l.w2).unwrap();
            x = x1.add(&ffn).unwrap();
        }
        x.slice_rows(0, 1).unwrap()
    }

    #[test]
    fn golden_h_global_matches_reference_path() {
        let enc = encoder(11);
        let spec = fig1_spec();
        let got = enc.encode(&spec).unwrap().h_global;
        let want = naive_encode(&enc, &spec);
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        // Small vocabulary keeps the sweep fast while covering every layer.
        let doc = r#"{
          "style": {
            "visual_style": [{"value": "A"}, {"value": "B"}],
            "motion_style": [{"value": "C"}]},
          "motion": {
            "type": [{"value": "T"}], "emotion": [{"value": "E"}],
            "amplitude": [{"value": "low"}], "speed": [{"value": "slow"}]},
          "camera": {
            "shot_scale": [{"value": "S"}], "viewing_angle": [{"value": "V"}],
            "movement": [{"value": "M"}]},
          "vfx": {
            "category": [{"value": "K"}],
            "effect": [{"value": "F", "metadata": {"category": "K", "subcategory": "s",
              "meaning": "m", "appearance": "a", "placement_dynamics": "p", "scenes": "x"}}]}
        }"#;
        let vocab = Vocabulary::load_str(doc).unwrap();
        let dict = SynonymDictionary::from_vocabulary(&vocab).unwrap();
        let mut rng = SeededRng::new(12);
        let mut enc = TagEncoder::new(&vocab, 8, &mut rng);
        let spec = ProductionSpec::from_tags([
            dict.canonicalize("A").unwrap(),
            dict.canonicalize("M").unwrap(),
            dict.canonicalize("F").unwrap(),
        ]);

        let loss_of = |model: &TagEncoder| -> f64 {
            let mut g = Graph::new();
            let nodes = model.leaves(&mut g);
            let (_, h_global) = model.encode_graph(&mut g, &nodes, spec.tags()).unwrap();
            let loss = g.sum_sq(h_global).unwrap();
            g.value(loss).data()[0]
        };

        let mut g = Graph::new();
        let nodes = enc.leaves(&mut g);
        let (_, h_global) = enc.encode_graph(&mut g, &nodes, spec.tags()).unwrap();
        let loss = g.sum_sq(h_global).unwrap();
        g.backward(loss);
        let analytic: Vec<Tensor> = nodes.flat().iter().map(|&id| g.grad(id)).collect();

        let params = enc.params_flat();
        let base = enc.clone();
        let err = finite_diff_check(
            &params,
            &analytic,
            |p| {
                let mut m = base.clone();
                m.set_params_flat(p);
                Ok(loss_of(&m))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
        let _ = &mut enc;
    }
}
