//! Caption grammar: three surface templates over a scene, the inverse parser,
//! and a prefix oracle listing which words may legally come next.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::scene::{
    color_from_word, shape_from_word, size_from_word, Color, ObjectSpec, SceneSpec, Shape, Size,
};
use crate::error::{Error, Result};

pub const TEMPLATE_COUNT: usize = 3;
/// Longest caption in tokens, counting BOS and EOS.
pub const MAX_CAPTION_TOKENS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Word(&'static str),
    Size,
    Color,
    Shape,
    Row,
    Col,
}

use Piece::*;

struct Template {
    lead: &'static [Piece],
    object: &'static [Piece],
    joiner: &'static [Piece],
}

const TEMPLATES: [Template; TEMPLATE_COUNT] = [
    // a large red circle at row 1 column 2 and a ...
    Template {
        lead: &[],
        object: &[
            Word("a"),
            Size,
            Color,
            Shape,
            Word("at"),
            Word("row"),
            Row,
            Word("column"),
            Col,
        ],
        joiner: &[Word("and")],
    },
    // objects : large red circle row 1 column 2 , small ...
    Template {
        lead: &[Word("objects"), Word(":")],
        object: &[Size, Color, Shape, Word("row"), Row, Word("column"), Col],
        joiner: &[Word(",")],
    },
    // there is a large red circle in row 1 column 2 and a ...
    Template {
        lead: &[Word("there"), Word("is")],
        object: &[
            Word("a"),
            Size,
            Color,
            Shape,
            Word("in"),
            Word("row"),
            Row,
            Word("column"),
            Col,
        ],
        joiner: &[Word("and")],
    },
];

/// Words outside the caption templates that the tokenizer still knows:
/// question/answer prompts and the captioning prefix.
pub const PROMPT_WORDS: [&str; 9] = [
    "what", "color", "is", "the", "?", "answer", "photo", "of", "shape",
];

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// The closed word list, in a fixed order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    let mut push = |w: &'static str| {
        if !words.contains(&w) {
            words.push(w);
        }
    };
    for t in &TEMPLATES {
        for p in t.lead.iter().chain(t.object).chain(t.joiner) {
            if let Word(w) = p {
                push(w);
            }
        }
    }
    for s in Size::ALL {
        push(s.word());
    }
    for c in Color::ALL {
        push(c.word());
    }
    for s in Shape::ALL {
        push(s.word());
    }
    for d in DIGITS {
        push(d);
    }
    for w in PROMPT_WORDS {
        push(w);
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub template: usize,
}

impl Caption {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

fn render_piece(p: Piece, o: &ObjectSpec, out: &mut Vec<&'static str>) {
    out.push(match p {
        Word(w) => w,
        Size => o.size.word(),
        Color => o.color.word(),
        Shape => o.shape.word(),
        Row => DIGITS[o.row],
        Col => DIGITS[o.col],
    });
}

pub fn caption_of(scene: &SceneSpec, template: usize) -> Result<Caption> {
    let t = TEMPLATES.get(template).ok_or_else(|| {
        Error::Config(format!(
            "template id {template} outside 0..{TEMPLATE_COUNT}"
        ))
    })?;
    if scene.grid_size > DIGITS.len() {
        return Err(Error::Config(format!(
            "grid_size {} too large",
            scene.grid_size
        )));
    }
    let mut words: Vec<&'static str> = t
        .lead
        .iter()
        .map(|p| match p {
            Word(w) => *w,
            _ => unreachable!("lead pieces are literal"),
        })
        .collect();
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            for p in t.joiner {
                render_piece(*p, o, &mut words);
            }
        }
        for p in t.object {
            render_piece(*p, o, &mut words);
        }
    }
    Ok(Caption {
        text: words.join(" "),
        template,
    })
}

/// All surface forms of a scene, one per template.
pub fn all_captions(scene: &SceneSpec) -> Vec<String> {
    (0..TEMPLATE_COUNT)
        .filter_map(|t| caption_of(scene, t).ok().map(|c| c.text))
        .collect()
}

#[derive(Default)]
struct Partial {
    size: Option<Size>,
    color: Option<Color>,
    shape: Option<Shape>,
    row: Option<usize>,
    col: Option<usize>,
}

fn parse_with(t: &Template, words: &[&str], grid_size: usize) -> Option<Vec<ObjectSpec>> {
    let mut i = 0;
    let expect_word =
        |i: &mut usize, w: &str| -> Option<()> { (words.get(*i) == Some(&w)).then(|| *i += 1) };
    for p in t.lead {
        if let Word(w) = p {
            expect_word(&mut i, w)?;
        }
    }
    let mut objects = Vec::new();
    loop {
        if !objects.is_empty() {
            for p in t.joiner {
                if let Word(w) = p {
                    expect_word(&mut i, w)?;
                }
            }
        }
        let mut part = Partial::default();
        for p in t.object {
            let w = *words.get(i)?;
            match p {
                Word(lit) => (w == *lit).then_some(())?,
                Size => part.size = Some(size_from_word(w)?),
                Color => part.color = Some(color_from_word(w)?),
                Shape => part.shape = Some(shape_from_word(w)?),
                Row => part.row = Some(digit(w, grid_size)?),
                Col => part.col = Some(digit(w, grid_size)?),
            }
            i += 1;
        }
        objects.push(ObjectSpec {
            shape: part.shape?,
            color: part.color?,
            size: part.size?,
            row: part.row?,
            col: part.col?,
        });
        if i == words.len() {
            return Some(objects);
        }
    }
}

fn digit(w: &str, grid_size: usize) -> Option<usize> {
    let d = DIGITS.iter().position(|x| *x == w)?;
    (d < grid_size).then_some(d)
}

/// Inverse of [`caption_of`]: recovers the scene and the template used.
pub fn parse_caption(text: &str, grid_size: usize) -> Result<(SceneSpec, usize)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    for (id, t) in TEMPLATES.iter().enumerate() {
        if let Some(objects) = parse_with(t, &words, grid_size) {
            let mut scene = SceneSpec { objects, grid_size };
            scene
                .validate()
                .map_err(|e| Error::Parse(format!("{text:?}: {e}")))?;
            scene.canonicalize();
            return Ok((scene, id));
        }
    }
    Err(Error::Parse(text.to_string()))
}

/// What may follow a caption prefix. `end` means the caption may stop here.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct NextWords {
    pub words: BTreeSet<&'static str>,
    pub end: bool,
}

fn piece_words(p: Piece, grid_size: usize, out: &mut BTreeSet<&'static str>) {
    match p {
        Word(w) => {
            out.insert(w);
        }
        Size => out.extend(Size::ALL.iter().map(|s| s.word())),
        Color => out.extend(Color::ALL.iter().map(|c| c.word())),
        Shape => out.extend(Shape::ALL.iter().map(|s| s.word())),
        Row | Col => out.extend(DIGITS[..grid_size].iter().copied()),
    }
}

fn piece_accepts(p: Piece, w: &str, grid_size: usize) -> bool {
    let mut set = BTreeSet::new();
    piece_words(p, grid_size, &mut set);
    set.contains(w)
}

/// Grammar oracle: the set of words that keep `prefix` a prefix of some
/// well-formed caption with at most `max_objects` objects. Position
/// distinctness and ordering are not enforced here.
pub fn next_words(prefix: &[&str], grid_size: usize, max_objects: usize) -> NextWords {
    let mut out = NextWords::default();
    for t in &TEMPLATES {
        // Flattened piece stream for the maximal caption, with the set of
        // indices where the caption may end.
        let mut stream: Vec<Piece> = t.lead.to_vec();
        let mut ends = Vec::new();
        for k in 0..max_objects {
            if k > 0 {
                stream.extend_from_slice(t.joiner);
            }
            stream.extend_from_slice(t.object);
            ends.push(stream.len());
        }
        if prefix.len() > stream.len() {
            continue;
        }
        let ok = prefix
            .iter()
            .zip(&stream)
            .all(|(w, p)| piece_accepts(*p, w, grid_size));
        if !ok {
            continue;
        }
        if ends.contains(&prefix.len()) {
            out.end = true;
        }
        if let Some(p) = stream.get(prefix.len()) {
            piece_words(*p, grid_size, &mut out.words);
        }
    }
    out
}

/// Compact attribute listing of a scene ("large red circle row 1 column 2",
/// objects joined by ","). Language-model pretraining places it before BOS
/// so that the model learns to condition on a preceding context.
pub fn scene_context(scene: &SceneSpec) -> Result<String> {
    let full = caption_of(scene, 1)?;
    Ok(full.text.trim_start_matches("objects : ").to_string())
}

/// Question about the color of the (unique) object with `shape`.
pub fn color_question(shape: Shape) -> String {
    format!("what color is the {} ? answer", shape.word())
}

/// Context + question + answer sentence used when pretraining the language
/// model, so that it learns the answer format.
pub fn qa_sentence(scene: &SceneSpec, target: &ObjectSpec) -> Result<String> {
    let ctx = caption_of(scene, 0)?;
    Ok(format!(
        "{} {} {}",
        ctx.text,
        color_question(target.shape),
        target.color.word()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scene::{gen_scene, SceneParams};
    use crate::rng::SeedStreams;

    fn one_object() -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                shape: Shape::Circle,
                color: Color::Red,
                size: Size::Large,
                row: 1,
                col: 2,
            }],
            grid_size: 4,
        }
    }

    #[test]
    fn template_zero_instantiation() {
        let c = caption_of(&one_object(), 0).unwrap();
        assert_eq!(c.text, "a large red circle at row 1 column 2");
        assert_eq!(c, caption_of(&one_object(), 0).unwrap());
    }

    #[test]
    fn other_templates() {
        assert_eq!(
            caption_of(&one_object(), 1).unwrap().text,
            "objects : large red circle row 1 column 2"
        );
        assert_eq!(
            caption_of(&one_object(), 2).unwrap().text,
            "there is a large red circle in row 1 column 2"
        );
        assert!(caption_of(&one_object(), 3).is_err());
    }

    #[test]
    fn parse_inverts_caption_of() {
        let p = SceneParams::default();
        let mut rng = SeedStreams::new(11).stream("parse");
        for i in 0..1000 {
            let s = gen_scene(&mut rng, &p);
            let t = i % TEMPLATE_COUNT;
            let c = caption_of(&s, t).unwrap();
            assert!(c.words().count() + 2 <= MAX_CAPTION_TOKENS, "{}", c.text);
            let (back, tid) = parse_caption(&c.text, 4).unwrap();
            assert_eq!(back, s);
            assert_eq!(tid, t);
        }
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_caption("a large red circle at row 9 column 2", 4).is_err());
        assert!(parse_caption("a large red circle at row 1", 4).is_err());
        assert!(parse_caption("", 4).is_err());
        assert!(parse_caption(
            "a large red circle at row 1 column 2 and a small red circle at row 1 column 2",
            4
        )
        .is_err());
    }

    #[test]
    fn next_words_follow_templates() {
        let start = next_words(&[], 4, 2);
        assert_eq!(
            start.words.iter().copied().collect::<Vec<_>>(),
            vec!["a", "objects", "there"]
        );
        assert!(!start.end);
        let colors = next_words(&["a", "large"], 4, 2);
        assert_eq!(colors.words.len(), 4);
        let full: Vec<&str> = "a large red circle at row 1 column 2".split(' ').collect();
        let after = next_words(&full, 4, 2);
        assert!(after.end);
        assert_eq!(after.words.iter().copied().collect::<Vec<_>>(), vec!["and"]);
        let two = "a large red circle at row 1 column 2 and a small blue square at row 3 column 0";
        let two: Vec<&str> = two.split(' ').collect();
        let after = next_words(&two, 4, 2);
        assert!(after.end && after.words.is_empty());
    }

    #[test]
    fn vocabulary_is_closed_over_captions() {
        let vocab = vocabulary();
        let p = SceneParams::default();
        let mut rng = SeedStreams::new(2).stream("v");
        for _ in 0..200 {
            let s = gen_scene(&mut rng, &p);
            for t in 0..TEMPLATE_COUNT {
                for w in caption_of(&s, t).unwrap().words() {
                    assert!(vocab.contains(&w), "{w}");
                }
            }
            let q = qa_sentence(&s, &s.objects[0]).unwrap();
            for w in q.split_whitespace() {
                assert!(vocab.contains(&w), "{w}");
            }
        }
    }
}
