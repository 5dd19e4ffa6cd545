//! Fixture helpers for unit tests.

use crate::geometry::BoundingBox;
use crate::store::{AnnotationStore, AnswerBox, ImageAnnotation, ObjectAnnotation, SourceQA};

pub fn obj(id: &str, name: &str, (x, y, w, h): (i32, i32, i32, i32), attrs: &[&str]) -> ObjectAnnotation {
    ObjectAnnotation {
        object_id: id.into(),
        names: vec![name.into()],
        bbox: BoundingBox { x: x as f64, y: y as f64, w: w as f64, h: h as f64 },
        attributes: attrs.iter().map(|a| a.to_string()).collect(),
    }
}

pub fn image(id: &str, objects: Vec<ObjectAnnotation>, qas: Vec<SourceQA>) -> ImageAnnotation {
    ImageAnnotation { image_id: id.into(), width: 200, height: 200, image_uri: None, objects, source_qas: qas }
}

pub fn qa(id: &str, question: &str, answer: &str) -> SourceQA {
    SourceQA { qa_id: id.into(), question: question.into(), answer: answer.into(), answer_boxes: None }
}

pub fn which_qa(id: &str, question: &str, boxes: [(i32, i32, i32, i32); 4], correct: usize) -> SourceQA {
    SourceQA {
        qa_id: id.into(),
        question: question.into(),
        answer: String::new(),
        answer_boxes: Some(
            boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| AnswerBox {
                    bbox: BoundingBox { x: x as f64, y: y as f64, w: w as f64, h: h as f64 },
                    correct: i == correct,
                })
                .collect(),
        ),
    }
}

pub fn store(images: Vec<ImageAnnotation>) -> AnnotationStore {
    AnnotationStore::from_images(images)
}
