//! Serde helpers writing `f64` matrices with 17 significant digits, enough
//! for a lossless text round-trip.

use std::fmt::Write;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::numerics::Tensor2;

fn push_number(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to String");
}

pub fn row_text(row: &[f64]) -> String {
    let mut s = String::with_capacity(row.len() * 24 + 2);
    s.push('[');
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        push_number(&mut s, *v);
    }
    s.push(']');
    s
}

pub fn matrix_text(t: &Tensor2) -> String {
    let mut s = String::with_capacity(t.data().len() * 24 + 2 * t.rows() + 2);
    s.push('[');
    for i in 0..t.rows() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&row_text(t.row(i)));
    }
    s.push(']');
    s
}

fn raw(text: String) -> Box<RawValue> {
    RawValue::from_string(text).expect("formatted numbers are valid JSON")
}

fn tensor_from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<Tensor2, E> {
    Tensor2::from_rows(&rows).map_err(|e| E::custom(e.to_string()))
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(t: &Tensor2, s: S) -> Result<S::Ok, S::Error> {
        raw(matrix_text(t)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor2, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        tensor_from_rows(rows)
    }
}

pub mod matrices {
    use super::*;

    pub fn serialize<S: Serializer>(ts: &[Tensor2], s: S) -> Result<S::Ok, S::Error> {
        let mut text = String::from("[");
        for (i, t) in ts.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            text.push_str(&matrix_text(t));
        }
        text.push(']');
        raw(text).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Tensor2>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        all.into_iter().map(tensor_from_rows).collect()
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        raw(row_text(v)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(D::Error::custom("non-finite number"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Serialize, Deserialize)]
    struct Wrap {
        #[serde(with = "matrix")]
        m: Tensor2,
    }

    proptest! {
        #[test]
        fn seventeen_digits_round_trip_bitwise(vals in proptest::collection::vec(-1e12f64..1e12, 6)) {
            let m = Tensor2::from_vec(2, 3, vals).unwrap();
            let text = serde_json::to_string(&Wrap { m: m.clone() }).unwrap();
            let back: Wrap = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.m, m);
        }
    }

    #[test]
    fn numbers_carry_seventeen_significant_digits() {
        assert_eq!(row_text(&[0.1, -2.0]), "[1.0000000000000001e-1,-2.0000000000000000e0]");
    }
}
