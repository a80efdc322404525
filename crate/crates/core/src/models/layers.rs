use crate::tensor::{Result, Scalar, Tape, Var};

/// 2-D convolution; fields index the model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, params: &[Var]) -> Result<Var> {
        tape.conv2d(x, params[self.weight], params[self.bias], self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
}

impl Dense {
    /// Applies to `[N, D]`, or to `[N, T, D]` token by token.
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, params: &[Var]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() == 2 {
            return tape.linear(x, params[self.weight], params[self.bias]);
        }
        let d = *shape.last().expect("non-scalar input");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, d])?;
        let y = tape.linear(flat, params[self.weight], params[self.bias])?;
        let mut out = shape;
        *out.last_mut().expect("non-scalar input") = tape.shape(y)[1];
        tape.reshape(y, &out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, params: &[Var]) -> Result<Var> {
        tape.layer_norm(x, params[self.gamma], params[self.beta])
    }
}

/// `relu(conv2(relu(conv1(x))) + skip(x))`, where the skip is the identity or a 1x1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub projection: Option<Conv>,
}

impl ResidualBlock {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, params: &[Var]) -> Result<Var> {
        let h = self.conv1.apply(tape, x, params)?;
        let h = tape.relu(h)?;
        let h = self.conv2.apply(tape, h, params)?;
        let skip = match &self.projection {
            Some(p) => p.apply(tape, x, params)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub heads: usize,
    pub norm1: Norm,
    pub qkv: Dense,
    pub proj: Dense,
    pub norm2: Norm,
    pub mlp1: Dense,
    pub mlp2: Dense,
}

impl EncoderLayer {
    /// Returns the layer output `[N, T, D]` and attention weights `[N, heads, T, T]`.
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, params: &[Var]) -> Result<(Var, Var)> {
        let &[n, t, d] = tape.shape(x) else {
            unreachable!("encoder input is [N, T, D]");
        };
        let heads = self.heads;
        let dh = d / heads;
        let h = self.norm1.apply(tape, x, params)?;
        let qkv = self.qkv.apply(tape, h, params)?;
        let qkv = tape.reshape(qkv, &[n, t, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut split = [x; 3];
        for (i, part) in split.iter_mut().enumerate() {
            let v = tape.narrow(qkv, 0, i, 1)?;
            *part = tape.reshape(v, &[n * heads, t, dh])?;
        }
        let [q, k, v] = split;
        let (attn, mixed) = scaled_dot_product(tape, q, k, v)?;
        let attn_maps = tape.reshape(attn, &[n, heads, t, t])?;
        let mixed = tape.reshape(mixed, &[n, heads, t, dh])?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[n, t, d])?;
        let out = self.proj.apply(tape, mixed, params)?;
        let x = tape.add(x, out)?;

        let h = self.norm2.apply(tape, x, params)?;
        let h = self.mlp1.apply(tape, h, params)?;
        let h = tape.gelu(h)?;
        let h = self.mlp2.apply(tape, h, params)?;
        Ok((tape.add(x, h)?, attn_maps))
    }
}

/// `softmax(q k^T / sqrt(d)) v` over `[B, T, d]` inputs; returns the weights and the mix.
pub fn scaled_dot_product<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().expect("3-d query");
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, S::from_f64(1.0 / (d as f64).sqrt()))?;
    let attn = tape.softmax(scores, 2)?;
    let mixed = tape.batch_matmul(attn, v, false)?;
    Ok((attn, mixed))
}
