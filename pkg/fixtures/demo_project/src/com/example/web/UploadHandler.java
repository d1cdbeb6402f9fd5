package com.example.web;

import java.io.File;
import java.io.FileOutputStream;
import java.io.InputStream;
import javax.servlet.http.HttpServletRequest;
import javax.servlet.http.Part;

public class UploadHandler {

    private static final String UPLOAD_DIR = "/var/uploads";

    public void saveUpload(HttpServletRequest request) throws Exception {
        Part part = request.getPart("file");
        String fileName = part.getSubmittedFileName();
        InputStream in = part.getInputStream();
        File target = new File(UPLOAD_DIR, fileName);
        FileOutputStream out = new FileOutputStream(target);
        byte[] buffer = new byte[8192];
        int count = in.read(buffer);
        while (count > 0) {
            out.write(buffer, 0, count);
            count = in.read(buffer);
        }
        out.close();
        in.close();
    }
}
