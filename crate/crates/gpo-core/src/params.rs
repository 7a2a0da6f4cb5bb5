//! Flattened parameter views with a stable naming scheme. The canonical
//! order here defines the layout of gradient vectors and optimizer state;
//! the frozen positional embedding is deliberately excluded.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{GpoError, Result};
use crate::operator::{GPOModel, PlainMlp};
use crate::tensor::TensorArchive;

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dyn2(a: &Array2<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

fn dyn1(a: &Array1<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Learnable tensors in canonical order (copies). Excludes `emb.B`.
pub fn named_arrays(model: &GPOModel) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    let e = &model.encoder;
    out.push(("encoder.w_in".into(), dyn2(&e.w_in)));
    out.push(("encoder.b_in".into(), dyn1(&e.b_in)));
    out.push(("encoder.u_mu".into(), dyn2(&e.u_mu)));
    out.push(("encoder.b_u_mu".into(), dyn1(&e.b_u_mu)));
    out.push(("encoder.u_sigma".into(), dyn2(&e.u_sigma)));
    out.push(("encoder.b_u_sigma".into(), dyn1(&e.b_u_sigma)));
    out.push(("encoder.u_w".into(), dyn2(&e.u_w)));
    out.push(("encoder.b_u_w".into(), dyn1(&e.b_u_w)));
    out.push(("encoder.w_mu".into(), dyn2(&e.w_mu)));
    out.push(("encoder.b_mu".into(), dyn1(&e.b_mu)));
    out.push(("encoder.w_sigma".into(), dyn2(&e.w_sigma)));
    out.push(("encoder.b_sigma".into(), dyn1(&e.b_sigma)));
    out.push(("encoder.w_w".into(), dyn2(&e.w_w)));
    out.push(("encoder.b_w".into(), dyn1(&e.b_w)));
    let tied = model.config.model.tie_wz;
    for (k, layer) in model.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            out.push((format!("layers.{k}.heads.{h}.w_desc"), dyn2(&head.w_desc)));
            out.push((format!("layers.{k}.heads.{h}.w_p"), dyn2(&head.w_p)));
            if !tied || h == 0 {
                out.push((format!("layers.{k}.heads.{h}.w_z"), dyn2(&head.w_z)));
            }
            out.push((format!("layers.{k}.heads.{h}.w_q"), dyn2(&head.w_q)));
            out.push((format!("layers.{k}.heads.{h}.w_k"), dyn2(&head.w_k)));
            out.push((format!("layers.{k}.heads.{h}.w_v"), dyn2(&head.w_v)));
        }
        out.push((format!("layers.{k}.w_out"), dyn2(&layer.w_out)));
        if let Some(raw) = &model.lambda_raw {
            out.push((format!("layers.{k}.lambda_raw"), scalar(raw[k])));
        }
    }
    let dmod = &model.decoder;
    out.push(("decoder.w1".into(), dyn2(&dmod.w1)));
    out.push(("decoder.b1".into(), dyn1(&dmod.b1)));
    out.push(("decoder.w2".into(), dyn2(&dmod.w2)));
    out.push(("decoder.b2".into(), dyn1(&dmod.b2)));
    out
}

fn to2(arr: &ArrayD<f64>, name: &str) -> Result<Array2<f64>> {
    arr.clone()
        .into_dimensionality()
        .map_err(|e| GpoError::TensorFormat(format!("{name}: expected matrix: {e}")))
}

fn to1(arr: &ArrayD<f64>, name: &str) -> Result<Array1<f64>> {
    arr.clone()
        .into_dimensionality()
        .map_err(|e| GpoError::TensorFormat(format!("{name}: expected vector: {e}")))
}

fn to0(arr: &ArrayD<f64>, name: &str) -> Result<f64> {
    if arr.len() != 1 {
        return Err(GpoError::TensorFormat(format!("{name}: expected scalar")));
    }
    Ok(*arr.iter().next().unwrap())
}

fn check_same_shape(name: &str, old: &[usize], new: &[usize]) -> Result<()> {
    if old != new {
        return Err(GpoError::shape(name, format!("{old:?}"), format!("{new:?}")));
    }
    Ok(())
}

/// Write one named tensor back into the model. Tied `w_z` fans out to all
/// heads of the layer.
pub fn set_by_name(model: &mut GPOModel, name: &str, arr: &ArrayD<f64>) -> Result<()> {
    let parts: Vec<&str> = name.split('.').collect();
    let tied = model.config.model.tie_wz;
    let set2 = |slot: &mut Array2<f64>, arr: &ArrayD<f64>| -> Result<()> {
        let v = to2(arr, name)?;
        check_same_shape(name, slot.shape(), v.shape())?;
        *slot = v;
        Ok(())
    };
    let set1 = |slot: &mut Array1<f64>, arr: &ArrayD<f64>| -> Result<()> {
        let v = to1(arr, name)?;
        check_same_shape(name, slot.shape(), v.shape())?;
        *slot = v;
        Ok(())
    };
    match parts.as_slice() {
        ["encoder", field] => {
            let e = &mut model.encoder;
            match *field {
                "w_in" => set2(&mut e.w_in, arr),
                "b_in" => set1(&mut e.b_in, arr),
                "u_mu" => set2(&mut e.u_mu, arr),
                "b_u_mu" => set1(&mut e.b_u_mu, arr),
                "u_sigma" => set2(&mut e.u_sigma, arr),
                "b_u_sigma" => set1(&mut e.b_u_sigma, arr),
                "u_w" => set2(&mut e.u_w, arr),
                "b_u_w" => set1(&mut e.b_u_w, arr),
                "w_mu" => set2(&mut e.w_mu, arr),
                "b_mu" => set1(&mut e.b_mu, arr),
                "w_sigma" => set2(&mut e.w_sigma, arr),
                "b_sigma" => set1(&mut e.b_sigma, arr),
                "w_w" => set2(&mut e.w_w, arr),
                "b_w" => set1(&mut e.b_w, arr),
                other => Err(GpoError::TensorFormat(format!("unknown encoder field `{other}`"))),
            }
        }
        ["decoder", field] => {
            let d = &mut model.decoder;
            match *field {
                "w1" => set2(&mut d.w1, arr),
                "b1" => set1(&mut d.b1, arr),
                "w2" => set2(&mut d.w2, arr),
                "b2" => set1(&mut d.b2, arr),
                other => Err(GpoError::TensorFormat(format!("unknown decoder field `{other}`"))),
            }
        }
        ["layers", k, "w_out"] => {
            let k: usize = k.parse().map_err(|_| GpoError::TensorFormat(format!("bad layer index in `{name}`")))?;
            set2(&mut model.layers[k].w_out, arr)
        }
        ["layers", k, "lambda_raw"] => {
            let k: usize = k.parse().map_err(|_| GpoError::TensorFormat(format!("bad layer index in `{name}`")))?;
            let raw = model
                .lambda_raw
                .as_mut()
                .ok_or_else(|| GpoError::TensorFormat("model has fixed lambda".into()))?;
            raw[k] = to0(arr, name)?;
            Ok(())
        }
        ["layers", k, "heads", h, field] => {
            let k: usize = k.parse().map_err(|_| GpoError::TensorFormat(format!("bad layer index in `{name}`")))?;
            let h: usize = h.parse().map_err(|_| GpoError::TensorFormat(format!("bad head index in `{name}`")))?;
            if *field == "w_z" && tied {
                let v = to2(arr, name)?;
                for head in &mut model.layers[k].heads {
                    check_same_shape(name, head.w_z.shape(), v.shape())?;
                    head.w_z = v.clone();
                }
                return Ok(());
            }
            let head = &mut model.layers[k].heads[h];
            match *field {
                "w_desc" => set2(&mut head.w_desc, arr),
                "w_p" => set2(&mut head.w_p, arr),
                "w_z" => set2(&mut head.w_z, arr),
                "w_q" => set2(&mut head.w_q, arr),
                "w_k" => set2(&mut head.w_k, arr),
                "w_v" => set2(&mut head.w_v, arr),
                other => Err(GpoError::TensorFormat(format!("unknown head field `{other}`"))),
            }
        }
        _ => Err(GpoError::TensorFormat(format!("unknown parameter `{name}`"))),
    }
}

pub fn num_params(model: &GPOModel) -> usize {
    named_arrays(model).iter().map(|(_, a)| a.len()).sum()
}

/// Canonical flat parameter vector plus its layout.
pub fn flatten(model: &GPOModel) -> (Vec<f64>, Vec<ParamSpec>) {
    let mut values = Vec::new();
    let mut specs = Vec::new();
    for (name, arr) in named_arrays(model) {
        specs.push(ParamSpec {
            name,
            shape: arr.shape().to_vec(),
        });
        values.extend(arr.iter().cloned());
    }
    (values, specs)
}

/// Inverse of [`flatten`]; restores lambda values from raw logits.
pub fn unflatten(model: &mut GPOModel, values: &[f64]) -> Result<()> {
    let (_, specs) = flatten(model);
    let total: usize = specs.iter().map(|s| s.len()).sum();
    if values.len() != total {
        return Err(GpoError::shape("unflatten", format!("{total} values"), format!("{}", values.len())));
    }
    let mut off = 0;
    for spec in &specs {
        let chunk = &values[off..off + spec.len()];
        let arr = ArrayD::from_shape_vec(IxDyn(&spec.shape), chunk.to_vec())
            .map_err(|e| GpoError::TensorFormat(format!("{}: {e}", spec.name)))?;
        set_by_name(model, &spec.name, &arr)?;
        off += spec.len();
    }
    model.sync_lambda();
    Ok(())
}

/// Restore every named parameter from a checkpoint archive.
pub fn load_named_arrays(model: &mut GPOModel, arch: &TensorArchive) -> Result<()> {
    let names: Vec<String> = named_arrays(model).into_iter().map(|(n, _)| n).collect();
    for name in names {
        set_by_name(model, &name, arch.get(&name)?)?;
    }
    model.sync_lambda();
    Ok(())
}

/// Flat view of the pointwise comparison model.
pub fn flatten_mlp(model: &PlainMlp) -> (Vec<f64>, Vec<ParamSpec>) {
    let arrays: Vec<(String, ArrayD<f64>)> = vec![
        ("w1".into(), dyn2(&model.w1)),
        ("b1".into(), dyn1(&model.b1)),
        ("w2".into(), dyn2(&model.w2)),
        ("b2".into(), dyn1(&model.b2)),
        ("w3".into(), dyn2(&model.w3)),
        ("b3".into(), dyn1(&model.b3)),
    ];
    let mut values = Vec::new();
    let mut specs = Vec::new();
    for (name, arr) in arrays {
        specs.push(ParamSpec {
            name,
            shape: arr.shape().to_vec(),
        });
        values.extend(arr.iter().cloned());
    }
    (values, specs)
}

pub fn unflatten_mlp(model: &mut PlainMlp, values: &[f64]) -> Result<()> {
    let (old, specs) = flatten_mlp(model);
    if values.len() != old.len() {
        return Err(GpoError::shape("unflatten_mlp", format!("{} values", old.len()), format!("{}", values.len())));
    }
    let mut off = 0;
    for spec in &specs {
        let chunk = &values[off..off + spec.len()];
        let arr = ArrayD::from_shape_vec(IxDyn(&spec.shape), chunk.to_vec())
            .map_err(|e| GpoError::TensorFormat(format!("{}: {e}", spec.name)))?;
        match spec.name.as_str() {
            "w1" => model.w1 = to2(&arr, "w1")?,
            "b1" => model.b1 = to1(&arr, "b1")?,
            "w2" => model.w2 = to2(&arr, "w2")?,
            "b2" => model.b2 = to1(&arr, "b2")?,
            "w3" => model.w3 = to2(&arr, "w3")?,
            "b3" => model.b3 = to1(&arr, "b3")?,
            other => return Err(GpoError::TensorFormat(format!("unknown mlp field `{other}`"))),
        }
        off += spec.len();
    }
    Ok(())
}
